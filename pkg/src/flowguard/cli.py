"""Command-line front end.

Subcommands mirror the pipeline stages: gen-data, train, attack, guard,
run (full pipeline), report.  Exit codes: 0 success, 2 config error,
3 data error, 4 stage failure.
"""

import json
import sys
from pathlib import Path

import click
import numpy as np

from .dataset import save_csv, save_schema_json
from .errors import (
    AllFeaturesDropped,
    ClassTooSmall,
    ConfigError,
    EmptyDataset,
    FlowguardError,
    MissingLabelColumn,
    MixedLabels,
    ParseError,
    StageError,
)
from .guard import calibrate_thresholds, detect, save_guard, train_autoencoder
from .models import evaluate, load_model, save_model
from .pipeline import (
    ExperimentConfig,
    GuardTrainConfig,
    _mad_trim_mask,
    _select_attack_targets,
    _train_from_spec,
    canonical_report_json,
    prepare_data,
    run_experiment,
    write_report,
)
from .zoo import AttackConstraints, attack

_DATA_ERRORS = (MissingLabelColumn, ParseError, EmptyDataset, AllFeaturesDropped,
                ClassTooSmall, MixedLabels, FileNotFoundError)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_STAGE = 4


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    try:
        fn()
    except ConfigError as exc:
        _fail(EXIT_CONFIG, exc)
    except _DATA_ERRORS as exc:
        _fail(EXIT_DATA, exc)
    except StageError as exc:
        if isinstance(exc.cause, _DATA_ERRORS):
            _fail(EXIT_DATA, exc)
        _fail(EXIT_STAGE, exc)
    except FlowguardError as exc:
        _fail(EXIT_STAGE, exc)


def _load_config(config_path, seed, label_column):
    if config_path is None:
        cfg = ExperimentConfig.from_dict({})
    else:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = ExperimentConfig.from_json_text(path.read_text(encoding="utf-8"))
    if seed is not None:
        cfg.seed = seed
        cfg.zoo = None  # rederive the attack seed from the override
    if label_column is not None:
        cfg.label_column = label_column
    return cfg


def common_options(fn):
    fn = click.option("--config", "config_path", type=str, default=None,
                      help="experiment config JSON")(fn)
    fn = click.option("--out", "out_dir", type=str, required=True,
                      help="output directory")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="override the config seed")(fn)
    fn = click.option("--workers", type=int, default=1,
                      help="max concurrent attack workers")(fn)
    fn = click.option("--label-column", type=str, default=None,
                      help="label column name for CSV input")(fn)
    return fn


@click.group()
def main():
    """Traffic-classifier training, black-box evasion, autoencoder defense."""


@main.command("gen-data")
@common_options
def gen_data(config_path, out_dir, seed, workers, label_column):
    """Synthesize a flow dataset; writes data.csv + schema.json."""
    def go():
        from .pipeline import load_experiment_data
        cfg = _load_config(config_path, seed, label_column)
        if cfg.synth is None:
            raise ConfigError("gen-data needs a synth data section")
        ds = load_experiment_data(cfg)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_csv(ds, out / "data.csv")
        save_schema_json(ds.schema, out / "schema.json")
        click.echo(f"wrote {ds.num_records} records, "
                   f"{ds.num_features} features -> {out/'data.csv'}")
    _guarded(go)


@main.command("train")
@common_options
def train_cmd(config_path, out_dir, seed, workers, label_column):
    """Train victim (and shadow) models; writes model_*.json."""
    def go():
        cfg = _load_config(config_path, seed, label_column)
        schema, scaler, train_s, test_s = prepare_data(cfg)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = {}
        for i, spec in enumerate(cfg.victims):
            name = spec.get("name", spec["kind"])
            model = _train_from_spec(train_s, spec, cfg.seed + 10 + i)
            save_model(model, out / f"model_{name}.json")
            summary[name] = {
                "train_accuracy": evaluate(model, train_s).accuracy,
                "test_accuracy": evaluate(model, test_s).accuracy,
            }
        if cfg.shadow:
            model = _train_from_spec(train_s, cfg.shadow, cfg.seed + 20)
            save_model(model, out / "model_shadow.json")
            summary["shadow"] = {
                "train_accuracy": evaluate(model, train_s).accuracy,
                "test_accuracy": evaluate(model, test_s).accuracy,
            }
        with open(out / "clean_metrics.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
        for name, stats in summary.items():
            click.echo(f"{name}: train={stats['train_accuracy']:.3f} "
                       f"test={stats['test_accuracy']:.3f}")
    _guarded(go)


@main.command("attack")
@common_options
def attack_cmd(config_path, out_dir, seed, workers, label_column):
    """Run the evasion attack against trained models in --out."""
    def go():
        cfg = _load_config(config_path, seed, label_column)
        schema, scaler, train_s, test_s = prepare_data(cfg)
        out = Path(out_dir)
        model_paths = sorted(out.glob("model_*.json"))
        if not model_paths:
            raise ConfigError(f"no model_*.json files in {out}; run train first")
        constraints = AttackConstraints.from_schema(schema, scaler)
        zoo_cfg = cfg.zoo
        lines = []
        for path in model_paths:
            name = path.stem.removeprefix("model_")
            model = load_model(path)
            targets = _select_attack_targets(model, test_s, cfg.attack_samples)
            batch = [(test_s.X[i], test_s.y[i]) for i in targets]
            results = attack(model, batch, zoo_cfg, constraints, workers=workers)
            for j, r in zip(targets, results):
                doc = r.to_json_dict(scaler)
                doc.update({"victim": name, "mode": "direct",
                            "test_index": int(j), "label": int(test_s.y[j])})
                lines.append(doc)
            rate = float(np.mean([r.success for r in results]))
            click.echo(f"{name}: success_rate={rate:.3f} over {len(results)} samples")
        with open(out / "attack_results.jsonl", "w", encoding="utf-8") as fh:
            for doc in lines:
                fh.write(json.dumps(doc) + "\n")
    _guarded(go)


@main.command("guard")
@common_options
def guard_cmd(config_path, out_dir, seed, workers, label_column):
    """Train + calibrate the autoencoder guard; writes guard.json and
    verdicts over benign test records (and any stored attack results)."""
    def go():
        from .dataset import Dataset
        cfg = _load_config(config_path, seed, label_column)
        schema, scaler, train_s, test_s = prepare_data(cfg)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        keep = _mad_trim_mask(train_s.X, cfg.guard.trim_mad_z)
        benign_X = train_s.X[keep]
        n_fit = int(round(len(benign_X) * (1.0 - cfg.guard.calibration_fraction)))
        g_seed = cfg.guard.seed if cfg.guard.seed is not None else cfg.seed + 40
        fit_ds = Dataset(train_s.schema, benign_X[:n_fit],
                         np.zeros(n_fit, dtype=np.int64), ["benign"])
        guard = train_autoencoder(fit_ds, GuardTrainConfig(
            latent_dim=cfg.guard.latent_dim, epochs=cfg.guard.epochs,
            batch_size=cfg.guard.batch_size,
            learning_rate=cfg.guard.learning_rate, seed=g_seed))
        cal_ds = Dataset(train_s.schema, benign_X[n_fit:],
                         np.zeros(len(benign_X) - n_fit, dtype=np.int64),
                         ["benign"])
        thresholds = calibrate_thresholds(guard, cal_ds, cfg.guard.percentile)
        save_guard(guard, out / "guard.json", thresholds,
                   {"percentile": cfg.guard.percentile,
                    "num_samples": int(len(benign_X) - n_fit)})

        verdicts = []
        flags = []
        for i in range(test_s.num_records):
            v = detect(guard, thresholds, test_s.X[i])
            flags.append(v.anomalous)
            doc = v.to_json_dict()
            doc.update({"set": "benign_test", "test_index": i})
            verdicts.append(doc)
        click.echo(f"benign test FPR={float(np.mean(flags)):.4f} "
                   f"over {len(flags)} records")

        attack_file = out / "attack_results.jsonl"
        if attack_file.exists():
            adv_flags = []
            with open(attack_file, "r", encoding="utf-8") as fh:
                for line in fh:
                    doc = json.loads(line)
                    if not doc.get("success"):
                        continue
                    v = detect(guard, thresholds, np.array(doc["adversarial"]))
                    adv_flags.append(v.anomalous)
                    vd = v.to_json_dict()
                    vd.update({"set": "adversarial",
                               "victim": doc.get("victim"),
                               "test_index": doc.get("test_index")})
                    verdicts.append(vd)
            if adv_flags:
                click.echo(f"adversarial detection rate="
                           f"{float(np.mean(adv_flags)):.4f} "
                           f"over {len(adv_flags)} examples")
        with open(out / "verdicts.jsonl", "w", encoding="utf-8") as fh:
            for doc in verdicts:
                fh.write(json.dumps(doc) + "\n")
    _guarded(go)


@main.command("run")
@common_options
def run_cmd(config_path, out_dir, seed, workers, label_column):
    """Full pipeline: data, victims, attack, guard, detection, gating."""
    def go():
        cfg = _load_config(config_path, seed, label_column)
        report = run_experiment(cfg, out_dir, workers=workers)
        det = report.detection_summary
        click.echo(f"report written to {Path(out_dir)/'report.json'}")
        for name, modes in report.attack_summary.items():
            direct = modes.get("direct", {})
            if "post_attack_accuracy" in direct:
                click.echo(f"{name}: success={direct['success_rate']:.3f} "
                           f"post_attack_acc={direct['post_attack_accuracy']:.3f}")
        click.echo(f"guard: FPR={det['fpr_benign']:.4f} "
                   f"TPR={det['tpr_adversarial'] if det['tpr_adversarial'] is not None else 'n/a'}")
    _guarded(go)


@main.command("report")
@common_options
def report_cmd(config_path, out_dir, seed, workers, label_column):
    """Re-emit derived report files from an existing report.json."""
    def go():
        out = Path(out_dir)
        path = out / "report.json"
        if not path.exists():
            raise ConfigError(f"{path} not found; run the pipeline first")
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        write_report(doc, out)
        click.echo(canonical_report_json(doc, zero_timings=True))
    _guarded(go)


if __name__ == "__main__":
    main()
