"""Shared fixtures: analytic depth images and small synthetic scenes."""

from __future__ import annotations

import numpy as np
import pytest

from instmap.camera import CameraIntrinsics, Frame, Pose, pixel_rays
from instmap.detections import LabelSpace


@pytest.fixture(scope="session")
def space() -> LabelSpace:
    return LabelSpace.default()


@pytest.fixture
def small_k() -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(160, 120, 60)


def plane_frame(k: CameraIntrinsics, z: float = 2.0, pose: Pose = None, index: int = 0) -> Frame:
    """Frontal plane at camera depth z."""
    return Frame(index, np.full(k.shape, z), pose or Pose.identity(), k)


def sphere_depth(pose: Pose, k: CameraIntrinsics, center, radius: float) -> np.ndarray:
    """Per-pixel camera z of the first ray/sphere hit, 0 on a miss."""
    rays = pixel_rays(k).reshape(-1, 3)
    d = rays @ pose.rotation.T
    oc = pose.translation - np.asarray(center, dtype=float)
    a = np.einsum("ij,ij->i", d, d)
    b = 2 * d @ oc
    c = oc @ oc - radius**2
    disc = b * b - 4 * a * c
    t = np.where(disc >= 0, (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a), 0.0)
    t[t < 0] = 0.0
    # unit-z rays: the ray parameter is the camera depth
    return t.reshape(k.shape)


def sphere_ring_frames(k: CameraIntrinsics, center, radius: float, n: int = 12, distance: float = 2.0):
    frames = []
    c = np.asarray(center, dtype=float)
    for i, a in enumerate(np.linspace(0, 2 * np.pi, n, endpoint=False)):
        eye = c + distance * np.array([np.cos(a), np.sin(a), 0.25]) / np.hypot(1, 0.25)
        pose = Pose.look_at(eye, c)
        frames.append(Frame(i, sphere_depth(pose, k, c, radius), pose, k))
    return frames


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
