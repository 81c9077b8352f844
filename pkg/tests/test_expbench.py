import json

import numpy as np
import pytest

from ckptnoise.errors import ConfigError
from ckptnoise.expbench import data
from ckptnoise.expbench.scenario import ScenarioSpec, apply_overrides, load_scenario
from ckptnoise.expbench.studies import (
    STUDIES,
    Condition,
    get_pretrained,
    load_tables,
    run_combination_study,
    run_conditions,
    run_data_fraction_study,
    run_lambda_sweep,
    run_main_comparison,
    run_noise_type_study,
    run_norm_tracking,
    subsample,
    write_study,
)
from ckptnoise.trainkit import Dataset, Mixout

SMALL = {
    "seeds": [0, 1],
    "pretrain_data": {"n_sequences": 200},
    "pretrain": {"epochs": 1, "lr": 3e-3, "batch_size": 32, "seed": 1234},
    "downstream": {"n_eval": 60},
}


@pytest.fixture(scope="module")
def small():
    return ScenarioSpec.from_dict(SMALL)


# --- data ---------------------------------------------------------------------------


def bigram_tv(tokens, chain):
    k = chain.shape[0]
    counts = np.zeros((k, k))
    np.add.at(counts, (tokens[:, :-1].ravel(), tokens[:, 1:].ravel()), 1)
    emp = counts / counts.sum()
    expected = counts.sum(axis=1, keepdims=True) / counts.sum() * chain
    return 0.5 * np.abs(emp - expected).sum()


def test_bigrams_follow_the_chain():
    world = data.make_world(9, 2, 1.0, 2.0, 1234)
    corpus = data.gen_pretrain_corpus(world, 6250, 16, 0.15, 0)  # 10^5 tokens
    assert corpus.original.size == 10**5
    assert bigram_tv(corpus.original, world.pretrain_chain) < 0.02


def test_zero_shift_matches_pretraining_marginals():
    world = data.make_world(9, 2, 1.0, 2.0, 1234)
    assert np.array_equal(world.downstream_chain(0.0), world.pretrain_chain)
    a = data.gen_pretrain_corpus(world, 6250, 16, 0.15, 0).original
    b = data.sample_chain(world.downstream_chain(0.0), 6250, 16, np.random.default_rng(9))
    pa = np.bincount(a.ravel(), minlength=8) / a.size
    pb = np.bincount(b.ravel(), minlength=8) / b.size
    assert 0.5 * np.abs(pa - pb).sum() < 0.01


def test_shift_interpolates_chains():
    world = data.make_world(9, 2, 1.0, 2.0, 1234)
    mid = world.downstream_chain(0.5)
    np.testing.assert_allclose(mid, 0.5 * world.pretrain_chain + 0.5 * world.independent_chain)
    np.testing.assert_allclose(mid.sum(axis=1), 1.0)


def test_masking():
    world = data.make_world(33, 2, 1.0, 2.0, 1)
    c = data.gen_pretrain_corpus(world, 500, 16, 0.15, 3)
    masked = c.targets >= 0
    assert (c.tokens[masked] == world.mask_token).all()
    assert (c.targets[masked] == c.original[masked]).all()
    assert (c.tokens[~masked] == c.original[~masked]).all()
    assert masked.any(axis=1).all()
    assert abs(masked.mean() - 0.15) < 0.02
    again = data.gen_pretrain_corpus(world, 500, 16, 0.15, 3)
    assert np.array_equal(again.tokens, c.tokens)


def test_zero_mask_rate_warns():
    world = data.make_world(9, 2, 1.0, 2.0, 1)
    with pytest.warns(UserWarning, match="mask rate"):
        c = data.gen_pretrain_corpus(world, 10, 8, 0.0, 0)
    assert (c.targets == -1).all()


def test_downstream_split_properties():
    world = data.make_world(33, 2, 1.0, 2.0, 1234)
    train, ev = data.gen_downstream(world, 32, 400, 16, 0.5, 2, 2, 7)
    assert len(train) == 32 and len(ev) == 400
    for ds in (train, ev):
        frac = np.bincount(ds.labels, minlength=2) / len(ds)
        assert np.all(np.abs(frac - 0.5) <= 0.05)
        assert np.array_equal(ds.labels, data.dominant_bucket_labels(ds.tokens, world.buckets, 2, 2))
    assert not {r.tobytes() for r in train.tokens} & {r.tobytes() for r in ev.tokens}
    t2, e2 = data.gen_downstream(world, 32, 400, 16, 0.5, 2, 2, 7)
    assert np.array_equal(t2.tokens, train.tokens) and np.array_equal(e2.labels, ev.labels)


def test_fraction_arithmetic():
    ds = Dataset(np.arange(64).reshape(32, 2), np.zeros(32, dtype=np.int64))
    quarter = subsample(ds, 0.25, 0)
    half = subsample(ds, 0.5, 0)
    assert len(quarter) == 8 and len(half) == 16
    # nested: the smaller subset is contained in the larger
    assert set(quarter.tokens[:, 0]) <= set(half.tokens[:, 0])
    assert subsample(ds, 1.0, 0) is ds


# --- scenario -------------------------------------------------------------------


def test_default_scenario_round_trip():
    s = ScenarioSpec()
    assert ScenarioSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s
    assert len(s.seeds) == 20 and s.lam == 0.15


@pytest.mark.parametrize(
    "bad",
    [
        {"seeds": []},
        {"downstream": {"shift": 1.5}},
        {"downstream": {"n_train": 4}},
        {"unknown": 1},
        {"downstream": {"nope": 1}},
        {"lambda": -0.1},
    ],
)
def test_scenario_validation(bad):
    with pytest.raises(ConfigError):
        ScenarioSpec.from_dict(bad)


def test_config_precedence(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text('lambda = 0.2\nseeds = [1, 2]\n[finetune]\nlr = 0.003\n')
    s = load_scenario(p)
    assert s.lam == 0.2 and s.seeds == (1, 2) and s.finetune.lr == 0.003
    s = load_scenario(p, {"lambda": 0.1, "finetune.epochs": 4})
    assert s.lam == 0.1 and s.finetune.epochs == 4 and s.finetune.lr == 0.003
    j = tmp_path / "s.json"
    j.write_text(json.dumps({"lambda": 0.05}))
    assert load_scenario(j).lam == 0.05


def test_override_keys_must_exist():
    with pytest.raises(ConfigError):
        apply_overrides({}, {"finetune.learning_rate": 1})


def test_bad_config_files(tmp_path):
    (tmp_path / "x.yaml").write_text("a: 1")
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "x.yaml")
    (tmp_path / "b.toml").write_text("lambda = = 1")
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "b.toml")
    with pytest.raises(OSError, match="missing.toml"):
        load_scenario(tmp_path / "missing.toml")


def test_hash_is_stable_and_sensitive():
    a, b = ScenarioSpec(), ScenarioSpec()
    assert a.content_hash() == b.content_hash()
    c = ScenarioSpec.from_dict({"lambda": 0.2})
    assert c.content_hash() != a.content_hash()
    assert c.pretrain_hash() == a.pretrain_hash()


# --- studies --------------------------------------------------------------------


def test_pretrained_cache(tmp_path, small):
    a = get_pretrained(small, tmp_path)
    files = list(tmp_path.glob("pretrained-*.ntk"))
    assert len(files) == 1
    assert get_pretrained(small) is a


def test_main_comparison(small):
    t = run_main_comparison(small, extra_lambdas=(0.0, 5.0))
    assert [r["condition"] for r in t.rows] == ["no-noise", "lambda=0.15", "lambda=0", "lambda=5"]
    assert t.checks == {"lambda0_equals_no_noise": True}
    zero = t.row("lambda=0")
    assert zero["per_seed_accuracy"] == t.row("no-noise")["per_seed_accuracy"]
    assert zero["per_seed_paired_diff"] == [0.0, 0.0]
    assert len(t.row("lambda=5")["per_seed_accuracy"]) == 2


def test_noise_types_order(small):
    t = run_noise_type_study(small)
    assert [r["condition"] for r in t.rows] == [
        "no-noise",
        "global-gaussian",
        "global-uniform",
        "matrix-gaussian",
        "matrix-uniform",
    ]
    assert all(t.checks.values())


def test_combination_rows(small):
    t = run_combination_study(small)
    assert len(t.rows) == 6
    assert all(t.checks.values())
    main = run_main_comparison(small)
    assert t.row("vanilla")["per_seed_accuracy"] == main.row("no-noise")["per_seed_accuracy"]


def test_mixout_one_stays_at_pretrained(small):
    res = run_conditions(small, [Condition("m", method=Mixout(1.0))])
    for s in small.seeds:
        run = res["m"].runs[s]
        assert run.accuracy == run.trajectory.initial_accuracy
        assert all(v == 0.0 for v in run.trajectory.l1_change[-1].values())


def test_data_fraction(small):
    t = run_data_fraction_study(small, fractions=(0.25, 1.0))
    assert [r["n_train_used"] for r in t.rows] == [8, 8, 32, 32]
    main = run_main_comparison(small)
    full = [r for r in t.rows if r["fraction"] == 1.0]
    assert full[0]["per_seed_accuracy"] == main.row("no-noise")["per_seed_accuracy"]
    assert full[1]["per_seed_accuracy"] == main.row("lambda=0.15")["per_seed_accuracy"]
    assert all(t.checks.values())
    assert "spearman_no-noise" in t.extra


def test_norm_tracking(small):
    t = run_norm_tracking(small)
    assert all(r["mean_rel_change"] == 0.0 for r in t.rows if r["epoch"] == 0)
    assert set(t.extra["final_epoch"]) == {"embeddings", "attention", "ffn", "layernorm", "heads"}
    assert all(t.checks.values())
    frozen = ScenarioSpec.from_dict({**SMALL, "finetune": {"lr": 0.0, "epochs": 2, "batch_size": 8, "seed": 0}})
    t0 = run_norm_tracking(frozen)
    assert all(r["mean_rel_change"] == 0.0 for r in t0.rows)


def test_lambda_sweep(small):
    t = run_lambda_sweep(small)
    assert [r["lambda"] for r in t.rows] == list(small.lambda_grid)
    assert t.rows[0]["per_seed_paired_diff"] == [0.0, 0.0]
    t5 = run_lambda_sweep(small, grid=(0.1, 5.0))
    assert len(t5.rows) == 2 and all(t5.checks.values())


def test_written_outputs(tmp_path, small):
    t = run_lambda_sweep(small, grid=(0.0, 0.1))
    run_dir = write_study(t, small, tmp_path)
    assert run_dir.name == f"run-{small.content_hash()[:16]}"
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["spec_hash"] == small.content_hash()
    assert manifest["seeds"] == [0, 1]
    assert "timestamp" not in json.dumps(manifest)
    csv_lines = (run_dir / "lambda-sweep.csv").read_text().splitlines()
    assert csv_lines[0].startswith("condition,lambda,n_seeds,mean_accuracy")
    assert len(csv_lines) == 3
    (loaded,) = load_tables(run_dir)
    assert loaded.rows == json.loads(t.to_json())["rows"]


def test_parallel_equals_serial(small):
    serial = run_noise_type_study(small, jobs=1)
    parallel = run_noise_type_study(small, jobs=2)
    assert serial.to_csv() == parallel.to_csv()
    assert serial.to_json() == parallel.to_json()


def test_registry_names():
    assert list(STUDIES) == ["main", "noise-types", "combination", "data-fraction", "norm-tracking", "lambda-sweep"]
