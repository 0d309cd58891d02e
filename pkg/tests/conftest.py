import numpy as np
import pytest
import torch

from puckloc.data import EventRecord, InMemoryProvider
from puckloc.synth import EVENT_CYCLE, ScenarioConfig, clip_id_for, generate_clip, to_uint8_hwc
from puckloc.train import ClipDataset

torch.set_num_threads(1)


def make_toy_dataset(n, seed=0, clip_len=40, frame_size=64, **scenario):
    cfg = ScenarioConfig(rng_seed=seed, clip_len=clip_len, frame_size=frame_size, **scenario)
    clips, recs = {}, []
    for i in range(n):
        c = generate_clip(cfg, i)
        cid = clip_id_for(i)
        clips[cid] = to_uint8_hwc(c.frames)
        recs.append(EventRecord(cid, i, EVENT_CYCLE[i % 3], c.truth))
    return ClipDataset(recs, InMemoryProvider(clips), frame_size)


@pytest.fixture(scope="session")
def toy_ds():
    return make_toy_dataset(6, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)
