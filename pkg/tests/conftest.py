"""Shared fixtures: the synthetic box room and its fused reconstruction."""

from __future__ import annotations

import numpy as np
import pytest

from primfusion import synth
from primfusion.detector import DetectorConfig
from primfusion.pipeline import FusionConfig, reconstruct

# The box room is imaged at 64x64; 16 px seeding cells straddle the floor/wall
# creases in the outer rows, so the scene pipeline seeds with 8 px cells.
BOX_DETECTOR = DetectorConfig(cell_size=8)
BOX_VOXEL = 0.05

_acceptance_lines: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    _acceptance_lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance():
    return record_acceptance


@pytest.fixture(scope="session")
def box_spec():
    return synth.box_room()


@pytest.fixture(scope="session")
def box_intrinsics():
    return synth.default_intrinsics()


@pytest.fixture(scope="session")
def box_poses():
    return synth.arc_poses(20)


@pytest.fixture(scope="session")
def box_frames(box_spec, box_poses, box_intrinsics):
    return synth.synthesize(box_spec, box_poses, box_intrinsics)


@pytest.fixture(scope="session")
def box_reconstruction(box_spec, box_frames):
    return reconstruct(box_frames, box_spec.bbox_min, box_spec.bbox_max,
                       FusionConfig(voxel_size=BOX_VOXEL), BOX_DETECTOR)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
