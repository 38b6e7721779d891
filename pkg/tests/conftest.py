"""
Pytest Configuration and Fixtures for the Reliability Calculus

Features:
- Bundled system files loaded once per session
- Engine configuration isolated from the working directory (results log in tmp_path)
- Small hand-built computations shared across modules
- FastAPI TestClient setup
"""

import os
from fractions import Fraction
from pathlib import Path
from typing import Generator

import pytest
from fastapi.testclient import TestClient

from config import EngineConfig
from dsl import SystemFile, load_system
from terms import BinOp, Const, Normal, PointMass, Table, Update, Var, par, scoped, seq, step

ASSETS = Path(__file__).resolve().parent.parent / "assets"


# ============================================================================
# Configuration Fixtures
# ============================================================================

@pytest.fixture
def engine_config(tmp_path: Path) -> EngineConfig:
    """Default tunables; results log and assets pinned to known locations."""
    return EngineConfig(results_log=str(tmp_path / "results_log.txt"), assets_dir=str(ASSETS))


@pytest.fixture(autouse=True)
def isolated_environment(monkeypatch: pytest.MonkeyPatch, tmp_path: Path):
    """Keep RELIABILITY_* variables from the developer shell out of the tests."""
    for key in list(os.environ):
        if key.startswith("RELIABILITY_"):
            monkeypatch.delenv(key)
    monkeypatch.setenv("RELIABILITY_RESULTS_LOG", str(tmp_path / "results_log.txt"))
    monkeypatch.setenv("RELIABILITY_ASSETS_DIR", str(ASSETS))


# ============================================================================
# Bundled Systems
# ============================================================================

def asset(name: str) -> Path:
    return ASSETS / name


@pytest.fixture(scope="session")
def coin() -> SystemFile:
    return load_system(asset("coin.sys"))


@pytest.fixture(scope="session")
def discrete_sort() -> SystemFile:
    return load_system(asset("discrete_sort.sys"))


@pytest.fixture(scope="session")
def discrete_sort_blue(discrete_sort: SystemFile) -> SystemFile:
    return discrete_sort.with_constants({"val_c": "blue"})


@pytest.fixture(scope="session")
def voter_mean() -> SystemFile:
    return load_system(asset("voter_mean.sys"))


@pytest.fixture(scope="session")
def voter2() -> SystemFile:
    return load_system(asset("voter2.sys"))


@pytest.fixture(scope="session")
def vote2() -> SystemFile:
    return load_system(asset("vote2.sys"))


@pytest.fixture(scope="session")
def conv_belt() -> SystemFile:
    return load_system(asset("conv_belt.sys"))


@pytest.fixture(scope="session")
def normal_tail() -> SystemFile:
    return load_system(asset("normal_tail.sys"))


# ============================================================================
# Hand-built Computations
# ============================================================================

def c(value) -> Const:
    return Const(Fraction(value))


@pytest.fixture
def normal_pair_sum():
    """s ~ scope(s) { par { a ~ N(1, 4); b ~ N(2, 9) }; s ~ point(a + b) }"""
    inner = seq(
        par(Update("a", Normal(c(1), c(4))), Update("b", Normal(c(2), c(9)))),
        step(Update("s", PointMass(BinOp("+", Var("a"), Var("b"))))),
    )
    return step(scoped("s", inner))


@pytest.fixture
def two_coins():
    """Two independent fair bits and their sum."""
    bit = Table(((Fraction(0), Fraction(1, 2)), (Fraction(1), Fraction(1, 2))))
    return seq(
        par(Update("a", bit), Update("b", bit)),
        step(Update("s", PointMass(BinOp("+", Var("a"), Var("b"))))),
    )


# ============================================================================
# FastAPI TestClient Fixture
# ============================================================================

@pytest.fixture(scope="function")
def test_client() -> Generator[TestClient, None, None]:
    """Provide FastAPI TestClient for the reliability service."""
    import main
    main.config = EngineConfig(results_log=main.config.results_log, assets_dir=str(ASSETS))
    with TestClient(main.app) as client:
        yield client
