from __future__ import annotations

from pathlib import Path

import pytest

from jpo_bench.problems import Family, ProblemSet, generate


@pytest.fixture(scope="session")
def arm_problems() -> ProblemSet:
    return generate(Family.ARM, 4, 0)


@pytest.fixture(scope="session")
def wavepacket_problems() -> ProblemSet:
    return generate(Family.WAVEPACKET, 3, 0)


@pytest.fixture(scope="session")
def billiards_problems() -> ProblemSet:
    return generate(Family.BILLIARDS, 3, 0)


@pytest.fixture
def experiment_text() -> str:
    return """
version = 1
family = arm
ns = [2, 4]
seeds = [0, 1]
methods = [jpo, supervised]
refine = true

jpo {
  iterations = 20
  optimizer { kind = adam  step_size = 0.01 }
}

supervised {
  iterations = 10
  synthetic_size = 64
  batch_size = 16
}

refinement { max_iterations = 10 }
bfgs { max_iterations = 20 }
"""


@pytest.fixture
def experiment_file(tmp_path: Path, experiment_text: str) -> Path:
    path = tmp_path / "arm.conf"
    path.write_text(experiment_text)
    return path
