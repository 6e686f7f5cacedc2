import json

import numpy as np
import pytest

from rlcrack.errors import ParameterError
from rlcrack.harness import (
    AttackMetrics,
    IdentityAttacker,
    ParaphraseAttacker,
    UnrelatedAttacker,
    attacker_reference,
    evaluate_attack,
    export_report,
    generate_corpus,
    load_report,
    read_corpus,
)
from rlcrack.harness.cli import run_cli
from rlcrack.harness.report import histogram_path
from rlcrack.toylm import build_lm
from rlcrack.watermark import WatermarkScheme, detect


@pytest.fixture(scope="module")
def victim():
    return build_lm(64, 1, 0.0, 11)


@pytest.fixture(scope="module")
def corpus(victim):
    return generate_corpus(victim, WatermarkScheme.unigram(), 40, 64, 16, seed=3)


def test_empty_corpus_file(tmp_path, victim):
    path = tmp_path / "empty.jsonl"
    assert generate_corpus(victim, WatermarkScheme.windowed(), 0, 10, 4, seed=1, path=path) == []
    assert path.exists() and path.read_text() == ""
    assert read_corpus(path) == []
    with pytest.raises(ParameterError):
        generate_corpus(victim, WatermarkScheme.windowed(), -1, 10, 4, seed=1)


def test_corpus_is_byte_deterministic(tmp_path, victim):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    generate_corpus(victim, WatermarkScheme.windowed(), 5, 30, 8, seed=7, path=a)
    generate_corpus(victim, WatermarkScheme.windowed(), 5, 30, 8, seed=7, path=b)
    assert a.read_bytes() == b.read_bytes()


def test_corpus_round_trip_and_stored_z(tmp_path, victim):
    path = tmp_path / "c.jsonl"
    records = generate_corpus(victim, WatermarkScheme.entropy_gated(), 6, 40, 8, seed=2, path=path)
    back = read_corpus(path)
    assert back == records
    first = json.loads(path.read_text().splitlines()[0])
    assert {"version", "id", "prompt", "response", "scheme", "key_id", "z", "seed"} <= set(first)
    for rec in back:
        z = detect(rec.response, rec.scheme, victim_lm=victim, prompt=rec.prompt).z_score
        assert abs(z - rec.z) <= 1e-9


def test_mixed_keys_cycle(victim):
    keys = [11, 22, 33, 44]
    records = generate_corpus(victim, WatermarkScheme.unigram(), 9, 20, 4, seed=1, keys=keys)
    assert [r.key_id for r in records] == [i % 4 for i in range(9)]
    assert [r.scheme.key for r in records] == [keys[i % 4] for i in range(9)]


def test_strong_watermark_detected(victim):
    records = generate_corpus(victim, WatermarkScheme.windowed(4), 100, 200, 16, seed=1)
    assert np.mean([r.z > 4.0 for r in records]) >= 0.99


def test_identity_attacker_removes_nothing(corpus, victim):
    m = evaluate_attack(IdentityAttacker(), corpus, seed=0, victim=victim)
    assert m.removal_rate <= 0.01
    assert m.mean_semantic == pytest.approx(1.0)


def test_unrelated_attacker_fails_semantics(corpus, victim):
    m = evaluate_attack(UnrelatedAttacker(victim), corpus, seed=0, victim=victim)
    assert m.removal_rate >= 0.9
    assert m.esr <= 0.05


def test_vacuous_semantic_floor(corpus, victim):
    attacker = ParaphraseAttacker(attacker_reference(victim, 2.0), "resample")
    m = evaluate_attack(attacker, corpus, sem_threshold=0.0, seed=4)
    assert m.esr == m.removal_rate
    strict = evaluate_attack(attacker, corpus, seed=4)
    assert strict.esr <= strict.removal_rate
    assert strict.n_evaded / strict.n == strict.esr


def test_empty_corpus_rejected():
    with pytest.raises(ParameterError):
        evaluate_attack(IdentityAttacker(), [])


def test_histograms_conserve_counts(corpus, victim):
    m = evaluate_attack(ParaphraseAttacker(attacker_reference(victim, 2.0)), corpus, seed=1, victim=victim)
    assert set(m.histograms) == {"unwatermarked", "watermarked", "attacked"}
    for hist in m.histograms.values():
        assert sum(hist.counts) == m.n
        widths = np.diff(hist.edges)
        np.testing.assert_allclose(widths, 0.25)


def test_report_round_trip(tmp_path, corpus, victim):
    m = evaluate_attack(ParaphraseAttacker(attacker_reference(victim, 2.0)), corpus, seed=1, victim=victim)
    json_path, csv_path = export_report(m, tmp_path / "r.json", {"attacker": "resample"}, {"seed": 1})
    assert csv_path == histogram_path(json_path) and csv_path.exists()
    back, config, seeds = load_report(json_path)
    assert back.to_dict() == m.to_dict()
    assert {k: h.to_dict() for k, h in back.histograms.items()} == {k: h.to_dict() for k, h in m.histograms.items()}
    assert config == {"attacker": "resample"} and seeds == {"seed": 1}
    doc = json.loads(json_path.read_text())
    assert {"version", "config", "metrics", "histograms"} <= set(doc)
    assert {"esr", "removal", "mean_semantic", "n"} <= set(doc["metrics"])
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "bin_left,bin_right,unwatermarked,watermarked,attacked"
    cols = np.array([[int(x) for x in r.split(",")[2:]] for r in rows[1:]])
    assert cols.sum(axis=0).tolist() == [m.n] * 3


def test_empty_metrics_rejected(tmp_path):
    empty = AttackMetrics(0.0, 0.0, 0.0, 0, 0, 0, 4.0, 0.7)
    with pytest.raises(ParameterError):
        export_report(empty, tmp_path / "x.json")


# ---------------------------------------------------------------------------
# command line


def test_cli_gen_and_detect(tmp_path, capsys):
    out = tmp_path / "c.jsonl"
    argv = ["gen", "--scheme", "windowed", "--q", "0.5", "--bias", "2.0", "--key", "15485863", "--prefix", "4",
            "--n", "100", "--len", "200", "--seed", "1", "--out", str(out)]
    assert run_cli(argv) == 0
    assert out.exists() and len(out.read_text().splitlines()) == 100
    capsys.readouterr()
    assert run_cli(["detect", "--in", str(out), "--threshold", "4.0"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["max_abs_diff"] <= 1e-9
    assert summary["n"] == 100


def test_cli_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli(["gen", "--n", "3", "--out", str(tmp_path / "x.jsonl")])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run_cli(["bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run_cli(["gen", "--seed", "1", "--out", "x", "--frobnicate"])
    assert exc.value.code == 2
    for cmd in (["certify"], ["passk", "--in", "c"], ["train", "--in", "c", "--out", "p"], ["eval", "--in", "c", "--out", "r"]):
        with pytest.raises(SystemExit) as exc:
            run_cli(cmd)
        assert exc.value.code == 2
    capsys.readouterr()


def test_cli_validation_failure_is_nonzero(tmp_path, capsys):
    assert run_cli(["gen", "--q", "1.5", "--seed", "1", "--out", str(tmp_path / "x.jsonl")]) != 0
    assert "green_rate" in capsys.readouterr().err


def test_cli_certify_and_passk(tmp_path, capsys):
    corpus = tmp_path / "c.jsonl"
    lm = tmp_path / "lm.json"
    assert run_cli(["gen", "--scheme", "unigram", "--n", "10", "--len", "64", "--seed", "2", "--out", str(corpus), "--lm-out", str(lm)]) == 0
    cert = tmp_path / "cert.json"
    assert run_cli(["certify", "--lm", str(lm), "--scheme", "unigram", "--contexts", "1", "--scales", "1", "--n-samples", "20", "--seed", "3", "--out", str(cert)]) == 0
    doc = json.loads(cert.read_text())
    assert len(doc["strategies"]) == 2
    assert doc["grid_minimum"]["rho_star"] == min(s["rho_star"] for s in doc["strategies"])
    capsys.readouterr()
    assert run_cli(["passk", "--in", str(corpus), "--lm", str(lm), "--k", "1", "5", "--seed", "4"]) == 0
    res = json.loads(capsys.readouterr().out)["results"]
    assert [r["k"] for r in res] == [1, 5]
    assert res[1]["removal"] >= res[0]["removal"]
