import numpy as np
import pytest

from liber.behavior_stream import Behavior
from liber.data import generate_synthetic_stream
from liber.mocks import MockChatClient, MockEmbedClient
from liber.pipeline import Clients

GENRES = ("action", "comedy", "drama", "thriller", "romance")


def make_behaviors(n, user="u1", start=0, rating=4, topic=None):
    out = []
    for i in range(n):
        attrs = [("genre", GENRES[i % len(GENRES)])]
        if topic is not None:
            attrs.append(("topic", f"topic:{topic}"))
        out.append(Behavior(user, f"i{start + i}", f"Item {start + i}", tuple(attrs), rating, start + i))
    return out


def movie_behaviors(n, user="u1"):
    """Realistic movie-style rows: title with year plus three attributes."""
    rng = np.random.default_rng(7)
    directors = ("Steven Spielberg", "Nora Ephron", "Ridley Scott", "Sofia Coppola", "Akira Kurosawa")
    out = []
    for i in range(n):
        out.append(Behavior(
            user, f"m{i}", f"The Long Road Home Part {i + 1} ({1980 + i})",
            (("genre", GENRES[i % 5] + "|" + GENRES[(i + 2) % 5]),
             ("director", directors[i % 5]),
             ("period", f"{1980 + i}s")),
            int(rng.integers(1, 6)), i,
        ))
    return out


@pytest.fixture
def mock_clients():
    return Clients(MockChatClient(), MockEmbedClient())


@pytest.fixture(scope="session")
def synthetic():
    return generate_synthetic_stream(10, 180, 4, seed=1)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
