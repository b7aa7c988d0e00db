import json
import subprocess
import sys

import numpy as np
import pytest

from augnet.cli import main
from augnet.datasets import make_labeled_textures, make_texture_images
from augnet.store import load_checkpoint, load_embeddings, save_packed_dataset

CONFIG = {
    "spec": {"n_blocks": 1, "block_channels": 4, "in_side": 8,
             "embed_dim": 6, "seed": 0},
    "train": {"n_sources_per_batch": 4, "augments_per_source": 2,
              "steps": 5, "seed": 1},
    "augment": {"out_side": 8},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Packed dataset, config file, trained checkpoint and embedding store."""
    root = tmp_path_factory.mktemp("cliwork")
    images, labels = make_labeled_textures(2, 6, side=16, seed=3)
    data = root / "data.augt"
    save_packed_dataset(images, data)
    (root / "labels.json").write_text(json.dumps(labels))
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(CONFIG))
    ckpt = root / "model.augc"
    rc = main(["train", str(data), "--config", str(cfg), "--out", str(ckpt)])
    assert rc == 0
    store = root / "emb.auge"
    rc = main(["embed", str(ckpt), str(data), "--short-side", "16",
               "--out", str(store)])
    assert rc == 0
    return {"root": root, "data": data, "cfg": cfg, "ckpt": ckpt,
            "store": store, "labels": root / "labels.json"}


# ---------------------------------------------------------------------------
# usage errors (exit 1)


class TestUsage:
    def test_no_arguments(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_flag(self, work):
        with pytest.raises(SystemExit) as exc:
            main(["train", str(work["data"]), "--bogus", "--out", "x"])
        assert exc.value.code == 1

    def test_missing_required_out(self, work):
        with pytest.raises(SystemExit) as exc:
            main(["train", str(work["data"])])
        assert exc.value.code == 1

    def test_bad_loss_choice(self, work):
        with pytest.raises(SystemExit) as exc:
            main(["train", str(work["data"]), "--loss", "hinge", "--out", "x"])
        assert exc.value.code == 1

    def test_bad_threads_value(self, work, capsys):
        rc = main(["--threads", "0", "project", str(work["store"])])
        assert rc == 1
        assert "threads" in capsys.readouterr().err

    def test_installed_entry_point(self):
        proc = subprocess.run(["augnet"], capture_output=True, text=True)
        assert proc.returncode == 1
        assert "usage" in proc.stderr.lower()
        assert proc.stdout == ""


# ---------------------------------------------------------------------------
# data errors (exit 2)


class TestDataErrors:
    def test_missing_dataset(self, work, tmp_path, capsys):
        rc = main(["train", str(tmp_path / "nope.augt"), "--config",
                   str(work["cfg"]), "--out", str(tmp_path / "x.augc")])
        assert rc == 2
        assert "error" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, work, tmp_path, capsys):
        bad = tmp_path / "bad.augc"
        bad.write_bytes(b"AUGC garbage")
        rc = main(["embed", str(bad), str(work["data"]), "--out",
                   str(tmp_path / "e.auge")])
        assert rc == 2
        capsys.readouterr()

    def test_config_error(self, work, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"train": {"lr": -1}}')
        rc = main(["train", str(work["data"]), "--config", str(cfg),
                   "--out", str(tmp_path / "x.augc")])
        assert rc == 2
        assert "lr" in capsys.readouterr().err

    def test_unknown_query_id(self, work, capsys):
        rc = main(["retrieve", str(work["store"]), "zzz", "--k", "2"])
        assert rc == 2
        capsys.readouterr()

    def test_bad_cluster_k(self, work, capsys):
        rc = main(["cluster", str(work["store"]), "--k", "0"])
        assert rc == 2
        capsys.readouterr()

    def test_map_unknown_relevant_id(self, work, tmp_path, capsys):
        rel = tmp_path / "rel.json"
        rel.write_text(json.dumps({"0": [99]}))
        rc = main(["map", str(work["store"]), str(rel)])
        assert rc == 2
        capsys.readouterr()

    def test_probe_label_length_mismatch(self, work, tmp_path, capsys):
        lab = tmp_path / "short.json"
        lab.write_text(json.dumps([0, 1]))
        rc = main(["probe", str(work["ckpt"]), str(work["data"]),
                   "--labels", str(lab)])
        assert rc == 2
        capsys.readouterr()


# ---------------------------------------------------------------------------
# happy paths


class TestTrain:
    def test_loss_log_on_stdout(self, work, tmp_path, capsys):
        out = tmp_path / "m.augc"
        rc = main(["train", str(work["data"]), "--config", str(work["cfg"]),
                   "--out", str(out)])
        assert rc == 0
        captured = capsys.readouterr()
        lines = captured.out.strip().split("\n")
        assert len(lines) == 5
        for line in lines:
            step_s, loss_s = line.split("\t")
            int(step_s)
            float(loss_s)
        assert out.exists()

    def test_flag_overrides(self, work, tmp_path, capsys):
        out = tmp_path / "m.augc"
        rc = main(["train", str(work["data"]), "--config", str(work["cfg"]),
                   "--steps", "2", "--loss", "softmax", "--out", str(out)])
        assert rc == 0
        assert len(capsys.readouterr().out.strip().split("\n")) == 2
        state = load_checkpoint(out)
        assert state.step == 2
        assert state.meta["loss_kind"] == "softmax"

    def test_same_seed_byte_identical(self, work, tmp_path, capsys):
        a, b = tmp_path / "a.augc", tmp_path / "b.augc"
        for out in (a, b):
            rc = main(["train", str(work["data"]), "--config", str(work["cfg"]),
                       "--seed", "7", "--out", str(out)])
            assert rc == 0
        capsys.readouterr()
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_differs(self, work, tmp_path, capsys):
        a, b = tmp_path / "a.augc", tmp_path / "b.augc"
        main(["train", str(work["data"]), "--config", str(work["cfg"]),
              "--seed", "7", "--out", str(a)])
        main(["train", str(work["data"]), "--config", str(work["cfg"]),
              "--seed", "8", "--out", str(b)])
        capsys.readouterr()
        assert a.read_bytes() != b.read_bytes()


class TestEmbed:
    def test_store_contents(self, work):
        index = load_embeddings(work["store"])
        assert len(index.ids) == 12
        assert index.vectors.shape == (12, 6)
        assert np.all(np.abs(index.vectors) < 1.0)

    def test_byte_identical_rerun(self, work, tmp_path, capsys):
        a, b = tmp_path / "a.auge", tmp_path / "b.auge"
        for out in (a, b):
            rc = main(["embed", str(work["ckpt"]), str(work["data"]),
                       "--short-side", "16", "--out", str(out)])
            assert rc == 0
        capsys.readouterr()
        assert a.read_bytes() == b.read_bytes()


class TestRetrieve:
    def test_ranked_tsv(self, work, capsys):
        rc = main(["retrieve", str(work["store"]), "0", "--k", "3"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 3
        prev = -1.0
        for rank, line in enumerate(lines, start=1):
            r, nid, dist = line.split("\t")
            assert int(r) == rank
            assert nid != "0"
            assert float(dist) >= prev
            prev = float(dist)


class TestEvalPairs:
    def test_json_report(self, work, tmp_path, capsys):
        out = tmp_path / "report.json"
        rc = main(["eval-pairs", str(work["ckpt"]), str(work["data"]),
                   "--config", str(work["cfg"]), "--seed", "5",
                   "--out", str(out)])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["protocol"] == "pair-retrieval"
        assert "top-1" in doc["metrics"] and "top-10" in doc["metrics"]
        assert doc["metrics"]["top-1"] <= doc["metrics"]["top-10"]
        assert doc["seed"] == 5
        assert json.loads(out.read_text()) == doc

    def test_repeat_identical(self, work, tmp_path, capsys):
        outs = []
        for _ in range(2):
            main(["eval-pairs", str(work["ckpt"]), str(work["data"]),
                  "--config", str(work["cfg"]), "--seed", "5", "--k", "1,3"])
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]


class TestCluster:
    def test_json_with_accuracy(self, work, capsys):
        rc = main(["cluster", str(work["store"]), "--k", "2", "--labels",
                   str(work["labels"]), "--seed", "2"])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["protocol"] == "cluster"
        assert 0.0 <= doc["metrics"]["accuracy"] <= 1.0
        assert doc["metrics"]["inertia"] >= 0.0
        assert len(doc["assignment"]) == 12


class TestProbe:
    def test_embedding_probe(self, work, capsys):
        rc = main(["probe", str(work["ckpt"]), str(work["data"]),
                   "--labels", str(work["labels"]), "--short-side", "16"])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["protocol"] == "probe"
        assert doc["settings"]["features"] == "embedding"
        assert 0.0 <= doc["metrics"]["accuracy"] <= 1.0

    def test_tap_probe(self, work, capsys):
        rc = main(["probe", str(work["ckpt"]), str(work["data"]),
                   "--labels", str(work["labels"]), "--tap", "1"])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["settings"]["features"] == "tap1"


class TestMap:
    def test_map_report(self, work, tmp_path, capsys):
        rel = {str(q): [(q + 1) % 12, (q + 2) % 12] for q in range(4)}
        path = tmp_path / "rel.json"
        path.write_text(json.dumps(rel))
        rc = main(["map", str(work["store"]), str(path)])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["protocol"] == "map"
        assert 0.0 <= doc["metrics"]["mAP"] <= 1.0
        assert doc["settings"]["n_queries"] == 4


class TestProject:
    def test_tsv_rows(self, work, capsys):
        rc = main(["project", str(work["store"])])
        assert rc == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 12
        for line in lines:
            id_, x, y = line.split("\t")
            float(x)
            float(y)


class TestAugmentCommand:
    def test_writes_png_samples(self, work, tmp_path, capsys):
        out = tmp_path / "samples"
        rc = main(["augment", str(work["data"]), "--config", str(work["cfg"]),
                   "--n", "4", "--seed", "3", "--out", str(out)])
        assert rc == 0
        capsys.readouterr()
        files = sorted(p.name for p in out.iterdir())
        assert files == ["00000.png", "00001.png", "00002.png", "00003.png"]

    def test_seed_repeat_identical(self, work, tmp_path, capsys):
        a, b = tmp_path / "sa", tmp_path / "sb"
        for out in (a, b):
            rc = main(["augment", str(work["data"]), "--config",
                       str(work["cfg"]), "--n", "3", "--seed", "9",
                       "--out", str(out)])
            assert rc == 0
        capsys.readouterr()
        for name in ("00000.png", "00001.png", "00002.png"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
