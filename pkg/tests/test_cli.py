import csv
import json

import numpy as np
import pytest

from fedprompt.cli import load_config, main


def small_config(tmp_path, **overrides):
    cfg = {
        "seed": 0,
        "out_dir": str(tmp_path / "run"),
        "data": {"classes": 4, "train_per_class": 10, "test_per_class": 4,
                 "image_size": 8, "separation": 1.5, "noise": 0.5},
        "partition": {"mode": "pathological", "classes_per_client": 2},
        "model": {"dim": 8, "layers": 3, "heads": 2, "patch_size": 4,
                  "mix_layers": [2]},
        "train": {"clients": 6, "clients_per_round": 2, "rounds": 2,
                  "local_epochs": 1, "batch_size": 8},
        "heldout_fraction": 0.0,
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and key in cfg:
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


def read_metrics(out_dir):
    with open(out_dir / "metrics.csv", newline="") as fh:
        return list(csv.DictReader(fh))


class TestRunCommand:
    def test_smoke_run_writes_all_artifacts(self, tmp_path):
        path, cfg = small_config(tmp_path)
        assert main(["run", "--config", str(path)]) == 0
        out = tmp_path / "run"
        for name in ("config.json", "metrics.csv", "prompts.csv",
                      "prototypes.csv", "final_report.json"):
            assert (out / name).exists(), name
        rows = read_metrics(out)
        assert len(rows) == cfg["train"]["rounds"] + 1
        assert rows[0]["round"] == "0" and rows[0]["train_loss"] == ""
        report = json.loads((out / "final_report.json").read_text())
        assert 0.0 <= report["participating"]["mean_acc"] <= 1.0

    def test_same_seed_byte_identical_metrics(self, tmp_path):
        path, _ = small_config(tmp_path)
        main(["run", "--config", str(path), "--out", str(tmp_path / "a")])
        main(["run", "--config", str(path), "--out", str(tmp_path / "b")])
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_seed_override_changes_metrics(self, tmp_path):
        path, _ = small_config(tmp_path)
        main(["run", "--config", str(path), "--out", str(tmp_path / "a")])
        main(["run", "--config", str(path), "--seed", "7",
              "--out", str(tmp_path / "b")])
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a != b
        saved = json.loads((tmp_path / "b" / "config.json").read_text())
        assert saved["seed"] == 7

    def test_missing_field_names_it(self, tmp_path, capsys):
        path, _ = small_config(tmp_path)
        raw = json.loads(path.read_text())
        del raw["train"]["rounds"]
        path.write_text(json.dumps(raw))
        assert main(["run", "--config", str(path)]) == 2
        assert "train.'rounds'" in capsys.readouterr().err

    def test_invalid_json_rejected(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert main(["run", "--config", str(path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_heldout_columns_written(self, tmp_path):
        path, _ = small_config(tmp_path, heldout_fraction=0.34)
        assert main(["run", "--config", str(path)]) == 0
        rows = read_metrics(tmp_path / "run")
        assert all(row["heldout_mean_acc"] != "" for row in rows)
        report = json.loads(
            (tmp_path / "run" / "final_report.json").read_text())
        assert report["heldout"] is not None
        assert len(report["heldout"]["clients"]) == 2

    def test_workers_env_override(self, tmp_path, monkeypatch):
        path, _ = small_config(tmp_path)
        monkeypatch.setenv("FEDPROMPT_WORKERS", "2")
        cfg = load_config(str(path))
        assert cfg.train.workers == 2


class TestGradcheckCommand:
    def test_passes_on_healthy_model(self, capsys):
        assert main(["gradcheck", "--dim", "8", "--layers", "2",
                     "--classes", "3"]) == 0
        out = capsys.readouterr().out
        assert "shared" in out and "class" in out and "head" in out

    def test_fails_with_corrupted_backward(self, monkeypatch, capsys):
        from fedprompt import tensor as te

        true_matmul = te.matmul

        def corrupted(a, b):
            out = true_matmul(a, b)
            if a.requires_grad or b.requires_grad:
                tainted = te.Tensor(out.data, requires_grad=out.requires_grad)

                def bad_backward():
                    if a.requires_grad:
                        a.grad += 1.5 * (tainted.grad @ b.data.T)
                    if b.requires_grad:
                        b.grad += a.data.T @ tainted.grad

                te.record(tainted, bad_backward)
                return tainted
            return out

        monkeypatch.setattr(te, "matmul", corrupted)
        assert main(["gradcheck", "--dim", "8", "--layers", "2",
                     "--classes", "3"]) == 1

    def test_reports_blocks_separately(self, capsys):
        main(["gradcheck", "--dim", "8", "--layers", "2", "--classes", "3"])
        out = capsys.readouterr().out
        assert out.count("max relative error") == 4


class TestPartitionCommand:
    def test_pathological_histogram_has_k_bins(self, tmp_path):
        path, _ = small_config(tmp_path)
        assert main(["partition", "--config", str(path)]) == 0
        out = tmp_path / "run"
        with open(out / "label_histogram.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        per_client = {}
        for row in rows:
            if int(row["count"]) > 0:
                per_client.setdefault(row["client"], 0)
                per_client[row["client"]] += 1
        assert all(v == 2 for v in per_client.values())

    def test_partition_csv_disjoint(self, tmp_path):
        path, _ = small_config(tmp_path)
        main(["partition", "--config", str(path)])
        with open(tmp_path / "run" / "partition.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        train_rows = [r for r in rows if r["split"] == "train"]
        seen = [r["sample_index"] for r in train_rows]
        assert len(seen) == len(set(seen)) == 4 * 10

    def test_dirichlet_lower_entropy_than_high_beta(self, tmp_path):
        def entropy_for(beta, out):
            path, _ = small_config(
                tmp_path,
                partition={"mode": "dirichlet", "beta": beta},
                out_dir=str(tmp_path / out),
                data={"classes": 4, "train_per_class": 40, "test_per_class": 4,
                      "image_size": 8},
            )
            main(["partition", "--config", str(path)])
            with open(tmp_path / out / "label_histogram.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))
            hist = {}
            for row in rows:
                hist.setdefault(row["client"], []).append(int(row["count"]))
            values = []
            for counts in hist.values():
                counts = np.array(counts, dtype=float)
                if counts.sum() == 0:
                    continue
                p = counts / counts.sum()
                p = p[p > 0]
                values.append(float(-(p * np.log(p)).sum()))
            return np.mean(values)

        assert entropy_for(0.3, "low") < entropy_for(100.0, "high")


class TestEvalCommand:
    def test_reevaluation_matches_final_report(self, tmp_path):
        path, _ = small_config(tmp_path)
        main(["run", "--config", str(path)])
        out = tmp_path / "run"
        assert main(["eval", "--run-dir", str(out)]) == 0
        final = json.loads((out / "final_report.json").read_text())
        again = json.loads((out / "eval_report.json").read_text())
        assert again["participating"]["mean_acc"] == pytest.approx(
            final["participating"]["mean_acc"])
        assert again["participating"]["per_client"] == \
            final["participating"]["per_client"]

    def test_eval_personalized_run(self, tmp_path):
        path, _ = small_config(
            tmp_path, train={"clients": 6, "clients_per_round": 2, "rounds": 2,
                             "strategy": "personalized"})
        main(["run", "--config", str(path)])
        out = tmp_path / "run"
        final = json.loads((out / "final_report.json").read_text())
        assert main(["eval", "--run-dir", str(out)]) == 0
        again = json.loads((out / "eval_report.json").read_text())
        assert again["participating"]["mean_acc"] == pytest.approx(
            final["participating"]["mean_acc"])

    def test_missing_run_dir(self, tmp_path, capsys):
        assert main(["eval", "--run-dir", str(tmp_path / "nope")]) == 2
        assert "config.json" in capsys.readouterr().err


def test_config_roundtrip(tmp_path):
    path, _ = small_config(tmp_path)
    cfg = load_config(str(path))
    resolved = cfg.to_dict()
    # a resolved config parses back to the same resolved form
    path2 = tmp_path / "resolved.json"
    path2.write_text(json.dumps(resolved))
    assert load_config(str(path2)).to_dict() == resolved
