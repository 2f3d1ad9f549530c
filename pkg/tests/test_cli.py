"""Config round-trip, run directory discipline, CLI commands, determinism."""

import filecmp
import json
from pathlib import Path

import pytest

from finegrain import runner
from finegrain.cli import EXIT_DEPENDENCY, EXIT_OK, EXIT_VALIDATION, main
from finegrain.config import RunConfig, load_config, parse_config_text, save_config
from finegrain.errors import DependencyError, ValidationError


def tiny_config(**overrides):
    base = dict(
        seed=4, steps=6, cadence=3,
        patch_grid=2, hidden_dim=8, vision_layers=1, text_layers=1,
        cross_layers=1, heads=2, proj_dim=4, mlp_dim=16, max_len=24,
        caption_count=6, detection_scene_count=6, caption_batch=2, detection_batch=2,
        eval_per_subtask=2, retrieval_count=3, eval_seed=900,
    )
    base.update(overrides)
    return RunConfig(**base)


class TestConfig:
    def test_round_trip_lossless(self):
        config = tiny_config()
        parsed = parse_config_text(config.render())
        assert parsed == config
        assert parsed.config_hash() == config.config_hash()

    def test_missing_option_named(self):
        text = tiny_config().render().replace("cadence = 3\n", "")
        with pytest.raises(ValidationError, match="run.cadence"):
            parse_config_text(text, origin="test.ini")

    def test_bad_value_named(self):
        text = tiny_config().render().replace("seed = 4", "seed = banana")
        with pytest.raises(ValidationError, match="run.seed"):
            parse_config_text(text)

    def test_unknown_option_rejected(self):
        text = tiny_config().render().replace("[run]", "[run]\nwhat = 1")
        with pytest.raises(ValidationError, match="what"):
            parse_config_text(text)

    def test_cadence_must_divide_steps(self):
        with pytest.raises(ValidationError):
            tiny_config(steps=7, cadence=3)

    def test_invalid_sources_rejected(self):
        with pytest.raises(ValidationError):
            tiny_config(sources="captions,nonsense")

    def test_hash_changes_with_any_field(self):
        assert tiny_config().config_hash() != tiny_config(seed=5).config_hash()


class TestRunner:
    def test_gen_data_outputs_reproduce_and_embed_hash(self, tmp_path):
        config = tiny_config()
        written = runner.run_gen_data(config, tmp_path / "run")
        chash = config.config_hash()
        for path in written.values():
            content = path.read_text()
            assert chash in content
        manifest = json.loads(written["eval_manifest"].read_text())
        assert manifest["config_hash"] == chash

    def test_training_writes_log_and_checkpoints(self, tmp_path):
        config = tiny_config()
        result = runner.run_training(config, tmp_path / "run")
        assert result.checkpoint_steps == [3, 6]
        lines = result.loss_log.read_text().splitlines()
        assert lines[0] == f"# config_hash={config.config_hash()}"
        assert len(lines) == 2 + config.steps  # hash + header + one row per step
        kinds = [ln.split("\t")[1] for ln in lines[2:]]
        assert kinds == ["caption", "caption", "detection"] * 2

    def test_wrong_config_for_run_dir_is_hard_error(self, tmp_path):
        run_dir = tmp_path / "run"
        runner.run_training(tiny_config(), run_dir)
        with pytest.raises(DependencyError):
            runner.prepare_run_dir(tiny_config(seed=99), run_dir)

    def test_training_byte_identical_across_reruns(self, tmp_path):
        config = tiny_config()
        runner.run_training(config, tmp_path / "a")
        runner.run_training(config, tmp_path / "b")
        compare = filecmp.dircmp(tmp_path / "a", tmp_path / "b")

        def assert_equal_tree(cmp):
            assert not cmp.diff_files, cmp.diff_files
            assert not cmp.left_only and not cmp.right_only
            for sub in cmp.subdirs.values():
                assert_equal_tree(sub)

        assert_equal_tree(compare)

    def test_eval_checkpoint_of_other_config_rejected(self, tmp_path):
        config = tiny_config()
        result = runner.run_training(config, tmp_path / "run")
        other = tiny_config(seed=99)
        with pytest.raises(DependencyError):
            runner.run_eval(other, runner.checkpoint_path(tmp_path / "run", 6),
                            tmp_path / "other")

    def test_dynamics_reproduces_bit_identically(self, tmp_path):
        config = tiny_config(steps=6, cadence=2)  # 3 checkpoints: correlations computable
        run_dir = tmp_path / "run"
        runner.run_training(config, run_dir)
        t1, c1 = runner.run_dynamics(config, run_dir)
        first_t, first_c = t1.read_bytes(), c1.read_bytes()
        t2, c2 = runner.run_dynamics(config, run_dir)
        assert t2.read_bytes() == first_t
        assert c2.read_bytes() == first_c

    def test_grid_spec_parsing(self):
        arms = runner.parse_grid_spec("full:all; A:captions")
        assert arms[0][0] == "full" and len(arms[0][1]) == 4
        assert arms[1] == ("A", frozenset({"captions"}))
        with pytest.raises(ValidationError):
            runner.parse_grid_spec("bogus:all")
        with pytest.raises(ValidationError):
            runner.parse_grid_spec("")

    def test_ablation_writes_one_dir_per_arm_and_summary(self, tmp_path):
        config = tiny_config()
        summary = runner.run_ablation(config, "A:captions; full:all", tmp_path / "grid")
        lines = summary.read_text().splitlines()
        assert len(lines) == 4  # hash comment + header + 2 arms
        header = lines[1].split("\t")
        a_row = dict(zip(header, lines[2].split("\t")))
        full_row = dict(zip(header, lines[3].split("\t")))
        assert a_row["loss_VMA"] == "-" and a_row["loss_bbox"] == "-"
        assert full_row["loss_VMA"] == "x" and full_row["loss_bbox"] == "x"
        assert (tmp_path / "grid" / "a__cap").is_dir()
        assert (tmp_path / "grid" / "full__attr-cap-obj-region").is_dir()


class TestCli:
    def write_config(self, tmp_path):
        path = tmp_path / "config.ini"
        save_config(tiny_config(), path)
        return path

    def test_init_config_round_trips(self, capsys):
        assert main(["init-config", "--seed", "3"]) == EXIT_OK
        text = capsys.readouterr().out
        assert parse_config_text(text).seed == 3

    def test_full_pipeline_exit_codes(self, tmp_path, capsys):
        config_path = self.write_config(tmp_path)
        run_dir = tmp_path / "run"
        assert main(["gen-data", "--config", str(config_path), "--out", str(run_dir)]) == EXIT_OK
        assert main(["train", "--config", str(config_path), "--out", str(run_dir)]) == EXIT_OK
        ckpt = run_dir / "checkpoints" / "step_000006.ckpt"
        assert main(["eval", "--config", str(config_path), "--checkpoint", str(ckpt),
                     "--out", str(run_dir)]) == EXIT_OK
        assert main(["dynamics", "--config", str(config_path), "--out", str(run_dir)]) == EXIT_OK
        assert main(["report", "--out", str(run_dir)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "eval_step_000006" in out

    def test_validation_exit_code(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text(save_or_text := tiny_config().render().replace("seed = 4", "seed = x"))
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == EXIT_VALIDATION

    def test_dependency_exit_code(self, tmp_path):
        config_path = self.write_config(tmp_path)
        missing = tmp_path / "nope.ckpt"
        code = main(["eval", "--config", str(config_path), "--checkpoint", str(missing),
                     "--out", str(tmp_path / "run2")])
        assert code == EXIT_DEPENDENCY

    def test_missing_config_file(self, tmp_path):
        code = main(["train", "--config", str(tmp_path / "none.ini"),
                     "--out", str(tmp_path / "r")])
        assert code == EXIT_VALIDATION
