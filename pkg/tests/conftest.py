import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from unitprop.core import GroundTruth, SecondsInterval  # noqa: E402
from unitprop.featurestore import VideoRecord  # noqa: E402


def make_record(features, video_id="v0", unit_frames=16, fps=16.0):
    feats = np.asarray(features, dtype=np.float32)
    if feats.ndim == 1:
        feats = feats[:, None]
    return VideoRecord(video_id, fps, feats.shape[0] * unit_frames, unit_frames, feats)


def gt(start, end, video_id="v0", label="a"):
    return GroundTruth(video_id, SecondsInterval(float(start), float(end)), label)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
