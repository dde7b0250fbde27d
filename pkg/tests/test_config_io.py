import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resprobe import io
from resprobe.config import ConfigError, DataConfig, ExperimentConfig, ProbeSchedule, dumps, load_config, loads
from resprobe.nn import ArchitectureConfig, build_model, single_repr_config
from resprobe.share_unroll import SharingSpec, UnrollSpec, build_shared_model
from resprobe.train import TrainConfig


@settings(max_examples=30, deadline=None)
@given(
    epochs=st.integers(0, 50),
    lr=st.floats(1e-4, 1.0),
    seed=st.integers(0, 2**31),
    share=st.one_of(st.none(), st.integers(1, 4)),
    mode=st.sampled_from(["naive", "unshared_stats", "ubn_full"]),
    tau=st.floats(0.01, 0.5),
    every=st.integers(1, 5),
)
def test_config_yaml_roundtrip(epochs, lr, seed, share, mode, tau, every):
    cfg = ExperimentConfig(
        run_id="r1",
        architecture=single_repr_config(4, 4, (1, 8, 8), 10),
        train=TrainConfig(epochs=epochs, lr_schedule=[(10, lr), (math.inf, lr / 10)], seed=seed, flip=True),
        sharing=None if share is None else SharingSpec(share, mode),
        unroll=UnrollSpec(3, 0.5),
        probes=[ProbeSchedule("cosine_loss", every)],
        tau=tau,
    )
    back = loads(dumps(cfg))
    assert back == cfg
    assert back.seed == seed


@pytest.mark.parametrize(
    "text, match",
    [
        ("run_id: a\nbogus: 1\n", "bogus"),
        ("train: {epoch: 3}\n", "train.epoch"),
        ("probes: [cosine]\n", "unknown probe"),
        ("probes: [{name: l2_ratio, every: 0}]\n", "cadence"),
        ("data: {source: cifar10}\n", "needs a path"),
        ("tau: 0.7\n", "tau"),
        ("sharing: {share_from_block: 9}\n", "beyond"),
        ("architecture: {family: original}\n", "1x1"),
        ("run_id: a/b\n", "run_id"),
        ("[1, 2]\n", "mapping"),
        ("a: [\n", "parse"),
    ],
)
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        loads(text)


def test_shipped_configs_load():
    from pathlib import Path

    paths = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.yaml"))
    assert paths
    for p in paths:
        load_config(p)


def _models():
    arch = ArchitectureConfig("original", [(3, 3), (3, 4)], 3, (1, 4, 4), 3, "conv1x1")
    yield build_model(arch, 3)
    for mode in ("naive", "unshared_stats", "ubn_full"):
        yield build_shared_model(arch, SharingSpec(1, mode), 3)


@pytest.mark.parametrize("model", list(_models()), ids=["unshared", "naive", "unshared_stats", "ubn_full"])
def test_checkpoint_roundtrip_bit_exact(tmp_path, model, rng):
    for t in model.named_parameters().values():
        t.data[...] = rng.normal(size=t.data.shape)
    for name in model.named_buffers():
        model.set_buffer(name, rng.random(model.named_buffers()[name].shape))
    io.save_checkpoint(tmp_path / "a.ckpt", model, 7, {"note": "x"})
    back, header = io.load_checkpoint(tmp_path / "a.ckpt")
    assert header["epoch"] == 7 and header["extra"] == {"note": "x"}
    io.save_checkpoint(tmp_path / "b.ckpt", back, 7, {"note": "x"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    x = rng.normal(size=(3, 1, 4, 4))
    assert np.array_equal(back.logits(x), model.logits(x))


def test_checkpoint_corruption_detected(tmp_path):
    m = build_model(single_repr_config(1, 2, (1, 4, 4), 2))
    io.save_checkpoint(tmp_path / "c.ckpt", m)
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(io.CheckpointError, match="magic"):
        io.read_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(io.CheckpointError, match="truncated"):
        io.read_checkpoint(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\x00")
    with pytest.raises(io.CheckpointError, match="trailing"):
        io.read_checkpoint(tmp_path / "long")


def test_csv_log_format(tmp_path):
    log = io.CsvLog(tmp_path / "p.csv", io.PROBES_COLUMNS)
    log.write([{"run_id": "r", "epoch": 1, "split": "train", "probe": "l2_ratio", "block": np.int64(0),
                "stage": 0, "value": 0.1, "n_excluded": 0}])
    log.write([{"run_id": "r", "epoch": 2, "split": "train", "probe": "l2_ratio", "block": 1, "stage": 0, "value": None}])
    rows = io.read_csv(tmp_path / "p.csv")
    assert rows[0]["value"] == "0.1" and rows[0]["schema_version"] == "1"
    assert rows[1]["value"] == "" and rows[1]["n_excluded"] == ""
    with pytest.raises(KeyError, match="bogus"):
        log.write([{"bogus": 1}])


def test_data_config_tuple_normalisation():
    assert DataConfig(image_shape=[1, 8, 8]).image_shape == (1, 8, 8)


def test_digits_config_file_matches_experiment_builder():
    from pathlib import Path

    from resprobe import experiments as ex

    shipped = load_config(Path(__file__).resolve().parents[1] / "configs" / "digits_standin.yaml")
    built = ex.digits_config("data/digits-n0.3", seed=0)
    for part in ("architecture", "train", "data", "unroll", "tau"):
        assert getattr(shipped, part) == getattr(built, part), part
