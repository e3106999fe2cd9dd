from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

from .errors import ConfigError

# reference grids recorded in run metadata; nothing searches over them
# automatically, the single --lr / --batch values are what a run uses
LR_GRID = (1e-3, 7.5e-4, 5e-4, 2.5e-4, 1e-4)
BATCH_GRID = (512, 1024)


@dataclass
class RunConfig:
    dataset: Optional[str] = None
    variant: str = "full"
    k: int = 20
    d_red: int = 32
    d_att: int = 32
    mock_chat: bool = True
    mock_embed: bool = True
    chat_endpoint: Optional[str] = None
    embed_endpoint: Optional[str] = None
    chat_model: str = "llama-2-13b-chat"
    embed_model: str = "bert-base-uncased"
    temperature: float = 0.0
    label_threshold: int = 3
    positive_only_rating: Optional[int] = None
    min_interactions: Optional[int] = None
    seed: int = 0
    split_ratio: float = 0.9
    epochs: int = 30
    lr: float = 0.05
    batch: int = 32
    workers: int = 1
    max_retries: int = 3
    store: str = "liber-run"
    lr_grid: tuple[float, ...] = LR_GRID
    batch_grid: tuple[int, ...] = BATCH_GRID
    factors: Optional[tuple[str, ...]] = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"--split must be in (0, 1), got {self.split_ratio}")
        if self.k < 1:
            raise ConfigError(f"--k must be >= 1, got {self.k}")
        if self.d_red < 1 or self.d_att < 1:
            raise ConfigError("--dims must be positive")
        if self.epochs < 0 or self.batch < 1 or self.lr < 0:
            raise ConfigError("epochs, batch and lr must be non-negative (batch >= 1)")
        if not self.mock_chat and not self.chat_endpoint:
            raise ConfigError("either --mock-chat or --chat-endpoint is required")
        if not self.mock_embed and not self.embed_endpoint:
            raise ConfigError("either --mock-embed or --embed-endpoint is required")
        if self.max_retries < 0:
            raise ConfigError("--max-retries must be >= 0")
        if self.positive_only_rating is not None and not 1 <= self.positive_only_rating <= 5:
            raise ConfigError("--positive-only-rating must be in 1..5")
        return self

    def as_dict(self) -> dict:
        return asdict(self)
