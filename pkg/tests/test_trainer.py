"""Training loop: artifacts, determinism, divergence, the ablation grid."""

import json

import numpy as np
import pytest

from detlab.data import DatasetSpec, Scene, generate_dataset, render_scene
from detlab.errors import ConfigError
from detlab.losses import LossWeights
from detlab.model import ModelConfig, build_model
from detlab.strategies import QueryStrategy
from detlab.trainer import (
    LOSS_CSV_HEADER,
    TrainConfig,
    TrainingDiverged,
    ablate,
    epoch_mean_total,
    format_table,
    forward_losses,
    split_scenes,
    train,
)

TINY = ModelConfig(
    image_size=16,
    patch_size=8,
    hidden_dim=8,
    embed_dim=8,
    heads=2,
    encoder_layers=1,
    decoder_layers=1,
    ffn_dim=16,
)
RAQG = QueryStrategy(kind="raqg", m=5, x_max=4)


def scenes_fixture(n=5, seed=2):
    return generate_dataset(
        DatasetSpec(n_images=n, object_count_range=(1, 3), seed=seed)
    )


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(ranking_loss="huber")

    def test_loss_csv_header(self):
        assert LOSS_CSV_HEADER == "epoch,iter,cls,giou,l1,sgl1,total"


class TestSplit:
    def test_last_fifth_held_out(self):
        scenes = scenes_fixture(10)
        tr, held = split_scenes(scenes)
        assert len(tr) == 8 and len(held) == 2
        assert [s.id for s in held] == [8, 9]

    def test_250_splits_200_50(self):
        scenes = scenes_fixture(250)
        tr, held = split_scenes(scenes)
        assert len(tr) == 200 and len(held) == 50

    def test_tiny_sets_reuse_everything(self):
        scenes = scenes_fixture(1)
        tr, held = split_scenes(scenes)
        assert tr == held == scenes


class TestForwardLosses:
    def test_components_and_separate_ranking_node(self):
        detector = build_model(TINY, RAQG, 0)
        scene = scenes_fixture(1)[0]
        image = render_scene(scene, TINY.image_size)
        total, rank_node, comp = forward_losses(
            detector, image, scene.boxes_array(), RAQG, "sgl1", LossWeights()
        )
        assert set(comp) == {"cls", "giou", "l1", "sgl1", "total", "query_count"}
        assert np.isfinite(comp["total"])
        assert rank_node is not None and rank_node.data.shape == ()
        assert comp["query_count"] >= 1

    def test_fixed_strategy_has_no_ranking_node(self):
        strategy = QueryStrategy(kind="learnable_parameters", fixed_queries=3)
        detector = build_model(TINY, strategy, 0)
        scene = scenes_fixture(1)[0]
        image = render_scene(scene, TINY.image_size)
        _, rank_node, comp = forward_losses(
            detector, image, scene.boxes_array(), strategy, "sgl1", LossWeights()
        )
        assert rank_node is None
        assert comp["sgl1"] == 0.0
        assert comp["query_count"] == 3

    def test_empty_scene_skips_ranking_supervision(self):
        detector = build_model(TINY, RAQG, 0)
        empty = Scene(id=0, gt_boxes=[], crowd_level=0.0)
        image = render_scene(empty, TINY.image_size)
        total, rank_node, comp = forward_losses(
            detector, image, empty.boxes_array(), RAQG, "sgl1", LossWeights()
        )
        assert rank_node is None
        assert comp["sgl1"] == 0.0
        assert comp["query_count"] == RAQG.x_min
        assert np.isfinite(comp["total"])


class TestTrain:
    def test_smoke_writes_all_artifacts(self, tmp_path):
        out = tmp_path / "run"
        result = train(
            scenes_fixture(),
            TINY,
            TrainConfig(epochs=1, seed=0),
            RAQG,
            out_dir=out,
        )
        for name in (
            "checkpoint/manifest.json",
            "checkpoint/weights.bin",
            "loss_log.csv",
            "eval_log.json",
            "fppi_curve.csv",
            "pr_curve.csv",
            "config.json",
        ):
            assert (out / name).exists(), name
        lines = (out / "loss_log.csv").read_text().splitlines()
        assert lines[0] == LOSS_CSV_HEADER
        assert len(lines) == 1 + len(result.loss_rows)
        assert len(result.loss_rows) == 4  # 1 epoch over the 80% train split
        history = json.loads((out / "eval_log.json").read_text())
        assert history and history[-1]["epoch"] == 1
        config = json.loads((out / "config.json").read_text())
        assert config["strategy"]["kind"] == "raqg"
        assert config["train"]["epochs"] == 1

    def test_determinism_byte_identical_checkpoints(self, tmp_path):
        scenes = scenes_fixture()
        config = TrainConfig(epochs=2, seed=3)
        a, b = tmp_path / "a", tmp_path / "b"
        train(scenes, TINY, config, RAQG, out_dir=a)
        train(scenes, TINY, config, RAQG, out_dir=b)
        for name in ("checkpoint/weights.bin", "checkpoint/manifest.json", "loss_log.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_seed_changes_the_run(self, tmp_path):
        scenes = scenes_fixture()
        a, b = tmp_path / "a", tmp_path / "b"
        train(scenes, TINY, TrainConfig(epochs=1, seed=0), RAQG, out_dir=a)
        train(scenes, TINY, TrainConfig(epochs=1, seed=1), RAQG, out_dir=b)
        assert (a / "checkpoint/weights.bin").read_bytes() != (
            b / "checkpoint/weights.bin"
        ).read_bytes()

    def test_loss_decreases_over_short_run(self):
        result = train(
            scenes_fixture(),
            TINY,
            TrainConfig(epochs=20, lr=3e-3, seed=0, eval_every=20),
            RAQG,
        )
        first = epoch_mean_total(result.loss_rows, 1)
        last = epoch_mean_total(result.loss_rows, 20)
        assert last < first

    def test_empty_scene_list_rejected(self):
        with pytest.raises(ConfigError):
            train([], TINY, TrainConfig(epochs=1), RAQG)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_carries_location(self):
        with pytest.raises(TrainingDiverged) as excinfo:
            train(
                scenes_fixture(),
                TINY,
                TrainConfig(epochs=3, lr=1e8, seed=0),
                RAQG,
            )
        diag = excinfo.value.diagnostics
        assert {"epoch", "iter", "scene_id"} <= set(diag)


class TestAblate:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_grid_rows_and_divergence_recording(self):
        scenes = scenes_fixture(3)
        base = TrainConfig(epochs=1, seed=0, eval_every=5)
        cells = [
            {"label": "sgl1", "ranking_loss": "sgl1"},
            {"label": "blowup", "lr": 1e12, "epochs": 10},
            {"ranking_loss": "l1", "m": 3},
        ]
        rows = ablate(scenes, TINY, base, RAQG, cells)
        assert [r["label"] for r in rows] == ["sgl1", "blowup", "m=3,ranking_loss=l1"]
        assert rows[0]["diverged"] is False
        assert np.isfinite(rows[0]["recall"])
        assert rows[1]["diverged"] is True
        assert np.isnan(rows[1]["ap"])
        assert rows[2]["diverged"] is False

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="momentum"):
            ablate(scenes_fixture(2), TINY, TrainConfig(epochs=1), RAQG, [{"momentum": 0.9}])

    def test_table_files(self, tmp_path):
        scenes = scenes_fixture(2)
        rows = ablate(
            scenes,
            TINY,
            TrainConfig(epochs=1, seed=0, eval_every=5),
            RAQG,
            [{"label": "only"}],
            out_dir=tmp_path,
        )
        csv_lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert csv_lines[0] == "label,diverged,mean_query_count,mr,ap,recall"
        assert len(csv_lines) == 2
        text = (tmp_path / "ablation.txt").read_text()
        assert "only" in text and "recall" in text

    def test_format_table_handles_missing_cells(self):
        out = format_table([{"a": 1.0}, {"b": "x"}], ["a", "b"])
        assert "-" in out and "1.0000" in out
