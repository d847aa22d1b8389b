"""Integration tests for the complete gen -> train -> eval -> diagnose workflow."""

import json
import os
import shutil
import sys
import tempfile

import numpy as np
import pandas as pd
import pytest

# Add the project root to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import main
from assembly import ModuleToggles, build_model
from config import RunConfig
from datagen import AttributeSpec, Seasonality, generate_samples, make_qa, read_dataset
from diagnostics import diagnose, similarity_matrix
from diffcore import AdamW, backward, no_grad
from evalmetrics import run_eval
from expansion import expand
from patch_alignment import AlignmentConfig, pa_loss
from training import train

RUN_SLOW = os.getenv("MADI_RUN_SLOW") == "1"
slow = pytest.mark.skipif(not RUN_SLOW, reason="set MADI_RUN_SLOW=1 to run the long training checks")

SMALL_CONFIG = {
    "embed_dim": 16,
    "latent_dim": 8,
    "codebook_size": 4,
    "levels": 2,
    "pixel_patch": 8,
    "highlight_queries": 2,
    "heads": 2,
    "blocks": 1,
    "decoder_blocks": 1,
    "max_patches": 8,
    "max_positions": 256,
    "steps": 6,
    "batch_size": 2,
    "eval_interval": 3,
    "eval_samples": 4,
    "max_answer_tokens": 3,
    "workers": 2,
    "train_samples": 8,
    "eval_split_samples": 4,
    "ablation_tags": ["full", "no_pa"],
    "ablation_seeds": [0],
    "generation": {"length": [32, 48], "period": [6, 10], "event_count": [0, 1]},
}


@pytest.fixture
def small_config_file(temp_directory):
    path = os.path.join(temp_directory, "small.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(SMALL_CONFIG, f)
    return path


class TestCommandLineWorkflow:
    """Every subcommand on a small config, through main()."""

    def test_full_workflow(self, small_config_file, temp_directory, capsys):
        output_dir = os.path.join(temp_directory, "run")

        def run(*args):
            return main.main(["--config", small_config_file, "--output-dir", output_dir, *args])

        assert run("gen") == 0
        assert run("train") == 0
        assert run("eval") == 0
        assert run("eval", "--split", "train", "--tag", "no_num") == 0
        assert run("diagnose", "--instances", "2") == 0
        capsys.readouterr()
        assert run("ablate") == 0

        with open(os.path.join(output_dir, "metrics.jsonl"), encoding="utf-8") as f:
            assert len(f.readlines()) == SMALL_CONFIG["steps"]
        assert os.path.exists(os.path.join(output_dir, "best.ckpt"))
        assert os.path.exists(os.path.join(output_dir, "eval_eval_full.json"))
        assert os.path.exists(os.path.join(output_dir, "eval_train_no_num.json"))
        assert os.path.exists(os.path.join(output_dir, "diagnostics", "summary.json"))

        table = pd.read_csv(os.path.join(output_dir, "ablation.csv"))
        assert list(table["tag"]) == ["full", "no_pa"]
        assert table["score"].between(0.0, 1.0).all()

    def test_rerun_reproduces_metrics(self, small_config_file, temp_directory):
        logs = []
        for name in ("a", "b"):
            output_dir = os.path.join(temp_directory, name)
            for command in ("gen", "train"):
                assert main.main(["--config", small_config_file, "--output-dir", output_dir, command]) == 0
            with open(os.path.join(output_dir, "metrics.jsonl"), encoding="utf-8") as f:
                logs.append(f.read())
        assert logs[0] == logs[1]

    def test_restored_checkpoint_answers_like_trained_model(self, small_config_file, temp_directory):
        output_dir = os.path.join(temp_directory, "run")
        main.main(["--config", small_config_file, "--output-dir", output_dir, "gen"])
        config = main.load_config(small_config_file, output_dir=output_dir)
        samples = read_dataset(config.resolved_train_path)

        model = build_model(config)
        train(model, samples, output_dir=output_dir)
        restored = main.load_model(os.path.join(output_dir, "model.ckpt"))

        toggles = ModuleToggles.from_tag("full")
        for sample in samples[:3]:
            prepared = model.prepare_sample(sample)
            assert restored.answer(restored.prepare_sample(sample), toggles) == model.answer(prepared, toggles)


# --- Long training checks ---

@pytest.fixture(scope="module")
def trained_run():
    """The default configuration trained end to end on generated data."""
    if not RUN_SLOW:
        pytest.skip("set MADI_RUN_SLOW=1 to run the long training checks")
    output_dir = tempfile.mkdtemp()
    config = RunConfig(output_dir=output_dir, seed=0)
    main.cmd_gen(config)
    train_samples = read_dataset(config.resolved_train_path)
    eval_samples = read_dataset(config.resolved_eval_path)
    model = build_model(config)
    result = train(model, train_samples, eval_samples, output_dir=output_dir)
    yield config, model, result, train_samples, eval_samples
    shutil.rmtree(output_dir)


@pytest.mark.slow
@slow
class TestAcceptanceRuns:
    def test_patch_alignment_produces_diagonal_similarity(self):
        config = RunConfig(embed_dim=64, generation={"length": [256, 256]}, seed=0)
        model = build_model(config)
        samples = generate_samples(64, 0, config.generation, ("trend_class",))
        bundles = [expand(s.series[0].values, config.patch_size, config.pixel_patch) for s in samples]
        captions = [[model.vocab.encode(c) for c in b.captions] for b in bundles]
        alignment = AlignmentConfig(config.tau)
        optimizer = AdamW(model.numeric_encoder.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
        rng = np.random.default_rng(0)

        for _ in range(300):
            model.numeric_encoder.zero_grad()
            batch = rng.choice(len(bundles), size=8, replace=False)
            loss = None
            for i in batch:
                e_n = model.numeric_encoder(bundles[i].numeric_patches)
                e_v = model.visual_encoder(bundles[i].pixel_patches)
                e_s = model.text.encode_caption_ids(captions[i])
                term = pa_loss(e_n, e_v, e_s, alignment)
                loss = term if loss is None else loss + term
            backward(loss * (1.0 / len(batch)))
            optimizer.step()

        gaps = []
        with no_grad():
            for bundle in bundles:
                matrix = similarity_matrix(model.numeric_encoder(bundle.numeric_patches).data.data,
                                           model.visual_encoder(bundle.pixel_patches).data.data)
                off = matrix[~np.eye(matrix.shape[0], dtype=bool)]
                gaps.append(np.diag(matrix).mean() - off.mean())
        assert np.mean(gaps) >= 0.2

    def test_train_and_held_out_accuracy(self, trained_run):
        config, model, _, train_samples, eval_samples = trained_run

        train_report = run_eval(model, train_samples[:400], "full", workers=config.workers)
        eval_report = run_eval(model, eval_samples, "full", workers=config.workers)

        assert train_report.categorical_accuracy >= 0.95
        assert eval_report.categorical_accuracy >= 0.80
        assert eval_report.tasks["period_value"].relative_accuracy >= 0.7

    def test_clean_periodic_series(self, trained_run):
        _, model, _, _, _ = trained_run
        sample = make_qa(AttributeSpec(length=200, seasonality=Seasonality(25, 2.0)), "period_value")
        answer = model.answer(model.prepare_sample(sample), ModuleToggles.from_tag("full"))
        assert answer == "25"

    def test_common_space_is_shared_and_separated_from_unique(self, trained_run, tmp_path):
        _, model, _, _, eval_samples = trained_run

        summary = diagnose(model, eval_samples, str(tmp_path), max_instances=32)

        assert summary["mean_sim_common"] > summary["mean_sim_continuous"]
        assert summary["mean_abs_sim_zu_numeric"] <= 0.1
        assert summary["mean_abs_sim_zu_visual"] <= 0.1

    def test_full_model_beats_ablations_on_most_seeds(self, trained_run, tmp_path):
        config, _, _, _, _ = trained_run
        sweep = config.model_copy(update={
            "output_dir": str(tmp_path),
            "ablation_tags": ("full", "no_pa", "no_ddi"),
            "ablation_seeds": (0, 1, 2),
            "train_path": config.resolved_train_path,
            "eval_path": config.resolved_eval_path,
        })

        table = main.cmd_ablate(sweep).pivot(index="seed", columns="tag", values="categorical_accuracy")

        assert (table["full"] >= table["no_pa"]).sum() >= 2
        assert (table["full"] >= table["no_ddi"]).sum() >= 2
