import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))


class AnalyticField:
    """Duck-typed radiance field backed by an analytic scene (for renderer tests)."""

    def __init__(self, scene, dtype=torch.float64):
        self.scene = scene
        self.dtype = dtype
        self.aabb = torch.as_tensor(scene.aabb)

    def density(self, pts):
        return torch.as_tensor(self.scene.density(np.asarray(pts, dtype=np.float64)), dtype=self.dtype)

    def __call__(self, pts, dirs):
        p = np.asarray(pts.detach() if torch.is_tensor(pts) else pts, dtype=np.float64)
        sigma = np.zeros(len(p))
        rgb = np.zeros((len(p), 3))
        for prim in self.scene.primitives:
            inside = prim.contains(p)
            sigma += np.where(inside, prim.density, 0.0)
            rgb += np.where(inside[:, None], prim.albedo * prim.density, 0.0)
        rgb = np.where(sigma[:, None] > 0, rgb / np.maximum(sigma, 1e-30)[:, None], 0.0)
        return torch.as_tensor(sigma, dtype=self.dtype), torch.as_tensor(rgb, dtype=self.dtype)


@pytest.fixture
def analytic_field():
    return AnalyticField


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_record():
    """``record(n, ok, detail)``: print one PASS/FAIL line for criterion ``n`` and assert it."""

    def record(n, ok, detail):
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record
