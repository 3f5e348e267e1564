"""Smoke test for the hdir_py extension: tiny pipeline end to end.

Run with `python python/smoke_test.py` or under pytest after
`pip install --no-build-isolation crates/python`.
"""

import math
import os
import tempfile

import hdir_py

TINY = """
hidden = 16
bottleneck = 4
time_dim = 8
dataset_size = 64
pretrain_steps = 20
pretrain_batch = 8
directions = 3
sample_steps = 4
t_stop = 400
batch_size = 4
train_steps = 3
shift_hidden = 8
disc_hidden = 8
recon_hidden = 8
"""


def test_toy_data_round_trips_through_the_estimator():
    images, factors = hdir_py.toy_dataset(8, 0)
    assert len(images) == 8 and len(images[0]) == 256
    for image, truth in zip(images, factors):
        est = hdir_py.estimate(image)
        assert abs(est[0] - truth[0]) < 0.1
        assert abs(est[1] - truth[1]) < 0.1


def test_gradient_check():
    assert hdir_py.gradient_check(4, seed=1) < 1e-9


def test_settings():
    s = hdir_py.Settings(TINY)
    assert s.run_name.startswith("TOY16-400-4-3-")
    s.set("directions", "5")
    assert "directions = 5" in s.to_text()
    try:
        hdir_py.Settings("no_such_key = 1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")


def test_pipeline():
    settings = hdir_py.Settings(TINY)
    dm, losses = hdir_py.DiffusionModel.pretrain(settings)
    assert len(losses) == 20 and all(math.isfinite(v) for v in losses)
    assert dm.data_dim == 256
    assert len(dm.sample(2, seed=3, steps=4)) == 2

    dirs, metrics = dm.discover(settings)
    assert metrics.startswith("step,")
    assert len(metrics.strip().splitlines()) == 4
    assert dirs.count == 3

    plain = dirs.sample(seed=5)
    row = dirs.traverse(1, grid=5, seed=5)
    assert len(row) == 5
    assert row[2] == plain

    edited = dirs.edit(plain, [(0, 1.0)])
    assert len(edited) == 256
    assert 0.0 <= dirs.rca(pairs=20) <= 1.0
    try:
        dirs.traverse(3)
    except IndexError:
        pass
    else:
        raise AssertionError("direction 3 of 3 accepted")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        dirs.save(path)
        again = hdir_py.Directions.load(path)
        assert again.sample(seed=5) == plain
        try:
            hdir_py.Directions.load(os.path.join(tmp, "missing"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file loaded")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
