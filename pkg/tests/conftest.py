"""Shared fixtures.

The standard synthetic bundle and the pipeline runs over it are expensive
enough to build once per session; tests must not mutate them.
"""

import numpy as np
import pytest

from depthfuse import pipeline, synth
from depthfuse.core import FusionConfig


@pytest.fixture(scope="session")
def standard_bundle():
    keyframes, gt_depths = synth.standard_bundle()
    spec = synth.standard_scene_spec()
    return keyframes, gt_depths, spec.intrinsics


@pytest.fixture(scope="session")
def default_config():
    return FusionConfig()


@pytest.fixture(scope="session")
def stage_run(standard_bundle, default_config):
    """Pipeline over the standard bundle without pose refinement (the
    per-keyframe stages only); reused by filter/densify-level checks."""
    keyframes, _, intrinsics = standard_bundle
    return pipeline.run(keyframes, default_config, intrinsics,
                        pipeline.AblationFlags(pose_refine=False))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(42)
