import hashlib

import numpy as np
import pytest

from miat.errors import CheckpointError, ConfigError, DataError
from miat.harness import data as D
from miat.harness.checkpoint import (MAGIC, Checkpoint, load_checkpoint, roundtrip_equal,
                                     save_checkpoint)
from miat.harness.cli import main, params_report
from miat.harness.config import RunConfig, TASK_PRESETS, load_config, parse_config, preset
from miat.harness.train import evaluate_checkpoint, train


def small_dialog(tmp_path, n=96, seed=0):
    for split, s in (("train", seed), ("valid", seed + 1)):
        D.save_arrays(tmp_path / f"{split}.bin", "dialog-toy",
                      D.gen_dialog_toy(s, D.DialogSizes(examples=n)))
    return preset("dialog-toy", data=str(tmp_path), out=str(tmp_path / "run"), d=8, heads=2,
                  layers=1, embed_width=8, epochs=2, batch_size=32)


# -- config --------------------------------------------------------------------------------

def test_config_text_roundtrip_and_comments():
    cfg = RunConfig(task="fusion-toy", d=32, heads=4, lr_peak=5e-4)
    assert parse_config(cfg.to_text()) == cfg
    text = "# comment\ntask = instruct-toy   # trailing\n\nd = 16\nheads = 2\n"
    got = parse_config(text)
    assert (got.task, got.d, got.heads, got.batch_size) == ("instruct-toy", 16, 2, 32)


@pytest.mark.parametrize("text", [
    "d = 10\nheads = 4\n", "task = chess\n", "colour = red\n", "d = 8\nd = 8\n",
    "d = eight\n", "novalue\n", "dropout = 1.5\n", "utilities = v,v\n",
])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_presets_keep_the_schedule_shape():
    for task, values in TASK_PRESETS.items():
        cfg = preset(task)
        assert cfg.lr_start == 1e-5 and cfg.warmup_epochs == 1.0
        assert all(getattr(cfg, k) == v for k, v in values.items())
    assert preset("dialog-toy", epochs=3).epochs == 3
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg")


# -- synthetic data ------------------------------------------------------------------------

def file_digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.mark.parametrize("task", ["dialog-toy", "fusion-toy", "view-count-toy"])
def test_generation_is_seed_deterministic(tmp_path, task):
    a, b = D.generate(task, 5, tmp_path / "a"), D.generate(task, 5, tmp_path / "b")
    assert [file_digest(p) for p in a] == [file_digest(p) for p in b]
    c = D.generate(task, 6, tmp_path / "c")
    assert file_digest(a[0]) != file_digest(c[0])


def test_dialog_planted_oracle_is_perfect_and_blinded_is_near_chance():
    data = D.gen_dialog_toy(0, D.DialogSizes(examples=400))
    assert np.mean(D.planted_solver(data) == data["gold"]) == 1.0
    blind = np.mean(D.blinded_solver(data, np.random.default_rng(0)) == data["gold"])
    K = data["identity"].shape[1]
    assert blind <= 1 / K + 0.1


def test_dialog_arrays_reload_with_integer_indices(tmp_path):
    small_dialog(tmp_path, n=10)
    data = D.load_split("dialog-toy", tmp_path, "train")
    assert data["gold"].dtype == np.int64 and data["features"].dtype == np.float64
    with pytest.raises(DataError):
        D.load_split("fusion-toy", tmp_path, "train")


def test_instruct_episodes_roundtrip_and_script_rules(tmp_path):
    eps = D.gen_instruct_toy(3, 20)
    D.write_episodes(tmp_path / "e.episodes", eps)
    back = D.read_episodes(tmp_path / "e.episodes")
    assert len(back) == 20
    for a, b in zip(eps, back):
        for field in ("instructions", "goal", "features", "confidences", "actions", "objects", "masks"):
            assert np.array_equal(getattr(a, field), getattr(b, field))
        L = a.instructions.shape[0]
        assert int(np.sum(a.actions == D.COMPLETE)) == L
        assert a.actions[-1] == D.COMPLETE
        idx = a.instruction_index()
        assert idx[0] == 0 and idx[-1] == L - 1
        manip = a.actions >= 3
        manip &= a.actions != D.COMPLETE
        assert np.all(a.masks[manip] >= 0) and np.all(a.masks[~manip] == -1)


def test_truncated_episode_file_is_clean_error(tmp_path):
    D.write_episodes(tmp_path / "e.episodes", D.gen_instruct_toy(0, 3))
    raw = (tmp_path / "e.episodes").read_bytes()
    (tmp_path / "t.episodes").write_bytes(raw[:-7])
    with pytest.raises(CheckpointError):
        D.read_episodes(tmp_path / "t.episodes")


def test_view_count_label_counts_views_holding_the_target():
    data = D.gen_view_count_toy(0, D.ViewCountSizes(examples=50))
    protos = D.class_prototypes(D.OBJECT_CLASSES - 1, 16)
    for e in range(50):
        target = protos[data["target"][e]]
        near = np.linalg.norm(data["features"][e] - target, axis=-1) < 1.0
        assert int(near.any(axis=-1).sum()) == data["count"][e]


# -- checkpoints ---------------------------------------------------------------------------

def sample_checkpoint():
    rng = np.random.default_rng(0)
    return Checkpoint(3, RunConfig().to_text(), {"w": rng.normal(size=(2, 3)), "b": np.zeros(3)},
                      {"t": np.array(3.0), "m.0": rng.normal(size=(2, 3))},
                      np.random.default_rng(1).bit_generator.state)


def test_checkpoint_roundtrip_bytes(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, sample_checkpoint())
    assert path.read_bytes()[:4] == MAGIC
    assert roundtrip_equal(path)
    ck = load_checkpoint(path)
    assert ck.epoch == 3 and np.array_equal(ck.model["w"], sample_checkpoint().model["w"])


def test_checkpoint_corruption_is_clean_error(tmp_path):
    raw = sample_checkpoint().to_bytes()
    bad = {"trunc.ckpt": raw[:-10], "magic.ckpt": b"XXXX" + raw[4:],
           "version.ckpt": raw[:4] + (9).to_bytes(4, "little") + raw[8:], "tail.ckpt": raw + b"\0"}
    for name, blob in bad.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


# -- training ------------------------------------------------------------------------------

def test_training_is_deterministic_and_leaves_data_untouched(tmp_path):
    cfg = small_dialog(tmp_path)
    before = file_digest(tmp_path / "train.bin")
    a = train(cfg, log=None)
    b = train(cfg.replace(out=str(tmp_path / "run2")), log=None)
    assert a.final_loss == b.final_loss
    assert a.epoch_losses == b.epoch_losses
    assert file_digest(tmp_path / "train.bin") == before
    ca, cb = load_checkpoint(a.checkpoints[-1]), load_checkpoint(b.checkpoints[-1])
    for k in ca.model:
        assert np.array_equal(ca.model[k], cb.model[k])
    assert roundtrip_equal(a.checkpoints[-1])


def test_logged_metrics_match_posthoc_checkpoint_evaluation(tmp_path):
    cfg = small_dialog(tmp_path)
    result = train(cfg, log=None)
    posthoc = evaluate_checkpoint(result.checkpoints[-1], tmp_path)
    for k, v in result.metrics[-1].items():
        assert abs(posthoc[k] - v) <= 1e-9
    log = (tmp_path / "run" / "train.log").read_text().splitlines()
    assert log[0].startswith("epoch=1 loss=")
    assert any(line.startswith("metric=R@1 value=") for line in log)


# -- CLI -----------------------------------------------------------------------------------

def test_params_report_lines():
    lines = params_report()
    assert lines[0] == "component=ltmi_layer U=3 d=512 params=2366976"
    assert lines[1] == "component=naive_layer U=3 d=512 params=28353024"
    assert lines[2] == "ratio=0.083482"


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["params"]) == 0
    assert main([]) == 1
    assert main(["params", "--u", "0"]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 1
    assert main(["gradcheck", "--case", "no.such.case"]) == 1
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--data", str(tmp_path)]) == 2
    cfg = small_dialog(tmp_path)
    broken = D.load_split("dialog-toy", tmp_path, "train")
    broken["features"][0, 0, 0] = np.inf
    D.save_arrays(tmp_path / "train.bin", "dialog-toy", broken)
    (tmp_path / "blowup.cfg").write_text(cfg.to_text())
    assert main(["train", "--config", str(tmp_path / "blowup.cfg")]) == 3
    err = capsys.readouterr().err
    assert "error:" in err


def test_cli_gen_data_writes_runnable_config(tmp_path, capsys):
    assert main(["gen-data", "--task", "view-count-toy", "--seed", "2", "--out", str(tmp_path)]) == 0
    cfg = load_config(tmp_path / "run.cfg")
    assert cfg.task == "view-count-toy" and cfg.seed == 2 and cfg.data == str(tmp_path)
    assert main(["params", "--config", str(tmp_path / "run.cfg")]) == 0
    assert "component=model task=view-count-toy" in capsys.readouterr().out


def test_cli_gradcheck_single_case(capsys):
    assert main(["gradcheck", "--case", "tensor.softmax"]) == 0
    assert "status=pass" in capsys.readouterr().out
