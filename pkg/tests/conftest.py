"""Shared fixtures.

The tracking policy used by planner, transfer and acceptance tests is
trained once and cached under tests/_artifacts; delete that directory to
force a retrain.  Training tries a short list of seeds with the default
iteration budget and keeps the first run that converges, recording which
seed converged and after how many iterations in a sidecar file that the
acceptance suite reads back.
"""
from __future__ import annotations

import json
from pathlib import Path

import pytest

from drivetransfer.policy import load_policy, save_policy
from drivetransfer.train import PpoConfig, train_lane_tracking

ARTIFACTS = Path(__file__).resolve().parent / "_artifacts"
POLICY_CKPT = ARTIFACTS / "lk_policy.ckpt"
POLICY_META = ARTIFACTS / "lk_policy.json"
TRAINING_SEEDS = (0, 1, 2)


def _train_first_converged():
    attempts = []
    for seed in TRAINING_SEEDS:
        result = train_lane_tracking(PpoConfig(seed=seed))
        attempts.append({"seed": seed, "iterations": result.iterations,
                         "converged": result.converged})
        if result.converged:
            ARTIFACTS.mkdir(exist_ok=True)
            save_policy(POLICY_CKPT, result.policy, result.value)
            POLICY_META.write_text(json.dumps({
                "seed": seed,
                "iterations": result.iterations,
                "budget": result.config.max_iterations,
                "converged": True,
                "attempts": attempts,
            }, indent=2))
            return result.policy, result.value
    raise RuntimeError(
        f"lane tracking failed to converge for every seed in {TRAINING_SEEDS}")


@pytest.fixture(scope="session")
def trained_nets():
    """(policy, value) pair from a converged training run, cached on disk."""
    if POLICY_CKPT.exists() and POLICY_META.exists():
        return load_policy(POLICY_CKPT)
    return _train_first_converged()


@pytest.fixture(scope="session")
def trained_policy(trained_nets):
    return trained_nets[0]


@pytest.fixture(scope="session")
def training_meta(trained_nets):
    """Facts about the converged run: seed, iterations, budget, attempts."""
    return json.loads(POLICY_META.read_text())
