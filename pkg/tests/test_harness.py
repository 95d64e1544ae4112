import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from pcas.alignment import NonFiniteLossError
from pcas.autograd import Adam
from pcas.avsynth import generate_dataset, load_split
from pcas.harness import ablation, checkpoint, embeddings
from pcas.harness import train as T
from pcas.harness.cli import main
from pcas.harness.config import RunConfig, load_config
from pcas.harness.evaluate import MissingMasksError, evaluate, file_digest
from pcas.harness.metrics import confusion_matrix, f_beta, fscore, frame_audio_accuracy, miou

TINY = {"epochs": 3, "warmup_epochs": 1, "batch_size": 4, "num_layers": 1, "k_crops": 4}


# -- metrics -----------------------------------------------------------------


def naive_scores(pred, gt, k, beta2=0.3):
    tp = np.zeros(k)
    fp = np.zeros(k)
    fn = np.zeros(k)
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p == 255 or g == 255:
            continue
        if p == g:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    ious = {c: tp[c] / (tp[c] + fp[c] + fn[c]) for c in range(k) if tp[c] + fp[c] + fn[c] > 0}
    fs = {}
    for c in range(1, k):
        if tp[c] + fp[c] == 0 and tp[c] + fn[c] == 0:
            continue
        prec = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        rec = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        fs[c] = 0.0 if beta2 * prec + rec == 0 else (1 + beta2) * prec * rec / (beta2 * prec + rec)
    return ious, fs


def test_metrics_match_pixel_oracle():
    rng = np.random.default_rng(0)
    for _ in range(500):
        k = int(rng.integers(2, 5))
        vals = np.append(np.arange(k), 255)
        gt = rng.choice(vals, size=(8, 8), p=None).astype(np.uint8)
        pred = rng.choice(vals[:k], size=(8, 8)).astype(np.uint8)
        ious, fs = naive_scores(pred, gt, k)
        per, mean = miou(pred, gt, k - 1)
        assert per.keys() == ious.keys()
        for c in per:
            assert abs(per[c] - ious[c]) <= 1e-10
        assert abs(mean - np.mean(list(ious.values()))) <= 1e-10
        per_f, _ = fscore(pred, gt, k - 1)
        assert per_f.keys() == fs.keys()
        for c in per_f:
            assert abs(per_f[c] - fs[c]) <= 1e-10


def test_miou_examples():
    gt = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    per, m = miou(np.zeros((2, 2), np.uint8), gt, 1)
    assert per == {0: 0.5, 1: 0.0} and m == 0.25
    assert miou(gt, gt, 1)[1] == 1.0
    # class 2 absent from both -> excluded
    assert set(miou(gt, gt, 2)[0]) == {0, 1}
    assert set(miou(gt, gt, 1, include_background=False)[0]) == {1}


@pytest.mark.parametrize("p,r,expected", [(1.0, 1.0, 1.0), (0.5, 1.0, 0.65 / 1.15), (0.0, 0.0, 0.0)])
def test_f_beta_examples(p, r, expected):
    assert f_beta(p, r, 0.3) == pytest.approx(expected, abs=1e-12)


def test_metric_errors():
    with pytest.raises(ValueError):
        confusion_matrix(np.zeros((2, 2)), np.zeros((2, 3)), 2)
    with pytest.raises(ValueError):
        confusion_matrix(np.full((2, 2), 3), np.zeros((2, 2)), 2)


def test_frame_audio_accuracy():
    truth = np.array([[1, 0, 0], [0, 1, 1]], dtype=bool)
    assert frame_audio_accuracy(np.where(truth, 5.0, -5.0), truth) == 1.0
    assert frame_audio_accuracy(np.zeros((2, 3)), truth) == pytest.approx(1 - truth.mean())


# -- config / checkpoint -------------------------------------------------------


def test_config_round_trip_and_flat_keys(tmp_path):
    cfg = RunConfig.from_dict({"embed_dim": 32, "num_heads": 2, "tau": 0.2, "theta_fg": 0.5, "seed": 4})
    assert cfg.encoder.embed_dim == 32 and cfg.alignment.tau == 0.2 and cfg.segmenter.theta_fg == 0.5
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert load_config(p, env={}) == cfg
    assert load_config(p, env={"PCAS_SEED": "9"}).seed == 9


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"encoder": {"nope": 1}}, {"warmup_epochs": 9},
                                 {"lr_main": 0.0}, {"batch_size": 1}, {"pseudo_refresh_epochs": -1}])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        RunConfig.from_dict(bad)


def test_config_hash():
    a = RunConfig()
    assert a.hash() == RunConfig().hash()
    assert a.hash() != a.with_toggles(cmc=False).hash()
    with pytest.raises(ValueError):
        a.with_toggles(decoder=False)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5), "z": np.zeros((0, 3))}
    raw = checkpoint.encode(arrays, {"a": 1}, {"epoch": 2})
    back, cfg, meta = checkpoint.decode(raw)
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.astype("<f8").tobytes()
    assert cfg == {"a": 1} and meta == {"epoch": 2}
    assert checkpoint.encode(back, cfg, meta) == raw
    checkpoint.save(tmp_path / "x.ckpt", arrays, cfg, meta)
    assert (tmp_path / "x.ckpt").read_bytes() == raw


@pytest.mark.parametrize("corrupt", ["magic", "version", "truncate"])
def test_checkpoint_rejects(corrupt):
    raw = bytearray(checkpoint.encode({"w": np.ones(10)}, {}, {}))
    if corrupt == "magic":
        raw[0] = ord("X")
    elif corrupt == "version":
        raw[8] = 7
    else:
        raw = raw[:-8]
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(bytes(raw))


# -- embeddings ----------------------------------------------------------------


def fake_embeddings(n=4, d=6, project=True):
    rng = np.random.default_rng(1)
    rows = 3 * n
    vecs = rng.normal(size=(rows, d)).astype(np.float32)
    tags = [embeddings.TAGS[i % 3] for i in range(rows)]
    clips = [f"c{i // 3 // 2}" for i in range(rows)]
    frames = [(i // 3) % 2 for i in range(rows)]
    labels = [["dog"]] * rows
    proj = embeddings.principal_projection(vecs).astype(np.float32) if project else None
    return embeddings.EmbeddingFile(vecs, tags, clips, frames, labels, proj)


@pytest.mark.parametrize("project", [True, False])
def test_embedding_round_trip(tmp_path, project):
    emb = fake_embeddings(project=project)
    embeddings.save(tmp_path / "e.bin", emb)
    back = embeddings.load(tmp_path / "e.bin")
    assert back.vectors.tobytes() == emb.vectors.tobytes()
    assert back.tags == emb.tags and back.clips == emb.clips and back.frames == emb.frames
    if project:
        assert back.projection.tobytes() == emb.projection.tobytes()
    else:
        assert back.projection is None
    assert embeddings.encode(back) == embeddings.encode(emb)


def test_embedding_rejects_truncation():
    raw = embeddings.encode(fake_embeddings())
    with pytest.raises(embeddings.EmbeddingFormatError):
        embeddings.decode(raw[:-4])


def test_principal_projection_orders_variance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 5)) * np.array([5.0, 2.0, 1.0, 0.5, 0.1])
    p = embeddings.principal_projection(x)
    assert p.shape == (200, 2)
    assert p[:, 0].var() > p[:, 1].var() > 0.5
    assert abs(np.corrcoef(p[:, 0], p[:, 1])[0, 1]) < 1e-8


def test_matched_cosine_oracle():
    emb = fake_embeddings()
    x = emb.vectors.astype(np.float64)
    vals = []
    for i in range(0, len(x), 3):
        u, v = x[i + 1], x[i + 2]
        vals.append(u @ v / np.linalg.norm(u) / np.linalg.norm(v))
    assert embeddings.matched_cosine(emb) == pytest.approx(np.mean(vals), abs=1e-12)


# -- ablation bookkeeping --------------------------------------------------------


def test_ablation_rows_differ_only_in_toggles():
    base = RunConfig()
    rows = ablation.row_configs(base, ("table4", "table3"), seeds=[0, 1])
    assert len(rows) == 2 * (8 + 2)
    for table, name, cfg in rows:
        diff = {k for k, v in cfg.to_dict().items() if v != base.to_dict()[k]} - {"seed"}
        toggles = dict(ablation.TABLES[table])[name]
        assert diff == {k for k, v in toggles.items() if v != getattr(base, k)}
    bare = dict((n, c) for t, n, c in rows if c.seed == 0)["w/o CMC+CMPC+CMCC"]
    assert bare.enabled_terms == {"cls": True, "cmc": False, "cmpc": False, "cmcc": False}


def test_ablation_unknown_table():
    with pytest.raises(ValueError):
        ablation.row_configs(RunConfig(), ("table9",))


# -- end to end on a tiny dataset ----------------------------------------------


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    generate_dataset(root, 16, 2, 0)
    return root


@pytest.fixture(scope="module")
def tiny_run(tiny, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    T.train(RunConfig.from_dict(TINY), tiny, out)
    return out


def read_losses(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


def test_train_outputs(tiny_run):
    for e in (1, 2, 3):
        assert (tiny_run / f"epoch_{e:03d}.ckpt").exists()
    recs = read_losses(tiny_run / "losses.jsonl")
    warm = [r for r in recs if r["epoch"] == 0]
    late = [r for r in recs if r["epoch"] > 0]
    assert warm and all("cmpc" not in r or r["cmpc"] == 0.0 for r in warm)
    assert all(r["decoder"] is None for r in warm)
    assert any(r["decoder"] is not None for r in late)
    assert all(np.isfinite(r["total"]) for r in recs)


def test_resume_is_bit_identical(tiny, tiny_run, tmp_path):
    T.train(RunConfig.from_dict(TINY), tiny, tmp_path, max_epochs=2)
    T.train(RunConfig.from_dict(TINY), tiny, tmp_path, resume=tmp_path / "epoch_002.ckpt")
    assert read_losses(tmp_path / "losses.jsonl") == read_losses(tiny_run / "losses.jsonl")
    assert (tmp_path / "last.ckpt").read_bytes() == (tiny_run / "last.ckpt").read_bytes()


def test_zero_learning_rate_freezes_parameters(tiny):
    cfg = RunConfig.from_dict(TINY)
    clips = load_split(tiny, "train")
    from pcas.avsynth import DatasetManifest
    cfg = T.prepare_config(cfg, DatasetManifest.load(tiny), clips)
    model = T.PCASModel(cfg)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    opt = Adam(model.param_groups(), {"main": 0.0, "aux": 0.0})
    rng = np.random.default_rng(0)
    for i in range(0, len(clips), 4):
        T.train_step(model, opt, clips[i:i + 4], cfg, True, None, rng, 0.0)
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_evaluate_report(tiny, tiny_run):
    ckpt = tiny_run / "last.ckpt"
    digest = file_digest(ckpt)
    r = evaluate(ckpt, tiny, "test")
    assert file_digest(ckpt) == digest
    assert abs(r.miou - np.mean(list(r.per_class_iou.values()))) <= 1e-12
    assert all(0.0 <= v <= 1.0 for v in [r.miou, r.mean_f, r.frame_audio_accuracy, *r.per_class_iou.values()])
    assert r.config_hash and r.revision and r.num_frames == 2 * 5


def test_same_seed_runs_identical_metrics(tiny, tiny_run, tmp_path):
    T.train(RunConfig.from_dict(TINY), tiny, tmp_path)
    a = evaluate(tiny_run / "last.ckpt", tiny, "test").to_json()
    b = evaluate(tmp_path / "last.ckpt", tiny, "test").to_json()
    assert a == b


def test_masks_firewall(tiny, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(tiny, data)
    for d in data.glob("*/*/gt_masks"):
        shutil.rmtree(d)
    for f in data.glob("*/*/schedule.json"):
        f.unlink()
    T.train(RunConfig.from_dict(TINY), data, tmp_path / "run")
    assert (tmp_path / "run" / "last.ckpt").exists()
    with pytest.raises(MissingMasksError, match="gt_masks"):
        evaluate(tmp_path / "run" / "last.ckpt", data, "test")


def test_non_finite_loss_aborts(tiny, tmp_path, monkeypatch):
    real = T.train_step

    def step(model, opt, batch, cfg, warm, *a, **k):
        if not warm:
            raise NonFiniteLossError("loss is nan")
        return real(model, opt, batch, cfg, warm, *a, **k)

    monkeypatch.setattr(T, "train_step", step)
    with pytest.raises(T.TrainingAborted, match="last.ckpt"):
        T.train(RunConfig.from_dict(TINY), tiny, tmp_path)
    assert (tmp_path / "epoch_001.ckpt").exists()


def test_dataset_mismatch(tiny, tmp_path):
    with pytest.raises(T.DatasetMismatchError):
        T.train(RunConfig.from_dict({**TINY, "image_size": 64}), tiny, tmp_path)


def test_ablation_caches_and_saves_partial(tiny, tmp_path, monkeypatch):
    base = RunConfig.from_dict(TINY)
    res = ablation.run_ablation(base, tiny, tmp_path, tables=("table3",))
    assert [r.name for r in res.rows] == ["AST", "AST+TVP"]
    assert res.get("table3", "AST", 0)["config_hash"]

    def boom(*a, **k):
        raise RuntimeError("should be cached")

    monkeypatch.setattr(ablation, "train", boom)
    again = ablation.run_ablation(base, tiny, tmp_path, tables=("table3",))
    assert again.to_json() == res.to_json()
    with pytest.raises(ablation.AblationError):
        ablation.run_ablation(base, tiny, tmp_path / "other", tables=("table3",))
    saved = json.loads((tmp_path / "other" / "results.json").read_text())
    assert saved[0]["error"].startswith("RuntimeError")


def test_cli_end_to_end(tiny, tiny_run, tmp_path, capsys):
    ckpt = str(tiny_run / "last.ckpt")
    assert main(["eval", "--ckpt", ckpt, "--data", str(tiny), "--out", str(tmp_path / "m.json")]) == 0
    assert json.loads((tmp_path / "m.json").read_text())["split"] == "test"
    clip = next((tiny / "test").iterdir())
    assert main(["infer", "--ckpt", ckpt, "--clip", str(clip), "--out", str(tmp_path / "inf")]) == 0
    assert len(list((tmp_path / "inf").glob("*.pgm"))) == 5
    assert json.loads((tmp_path / "inf" / "classes.json").read_text())["0"] == "background"
    out = tmp_path / "e.bin"
    assert main(["dump-embeddings", "--ckpt", ckpt, "--data", str(tiny), "--out", str(out)]) == 0
    emb = embeddings.load(out)
    assert len(emb.vectors) == 3 * 2 * 5 and set(emb.tags) == set(embeddings.TAGS)


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)]) != 0
    assert "error" in capsys.readouterr().err
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "x").write_text("x")
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--samples", "4"]) != 0
