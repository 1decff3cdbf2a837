"""Command line surface: dataset synthesis, pretraining, evaluation
suites, and the enumeration oracle.

Exit codes: 0 success, 2 config error, 3 IO error, 4 numeric failure,
5 incompatible checkpoint, 6 enumeration size guard.
"""

import dataclasses
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import evalkit, model, oracle, report, synthgen, training
from .segments import Modality, WaveformSegment

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_COMPAT = 5
EXIT_GUARD = 6


class ConfigError(ValueError):
    pass


_SECTION_FIELDS = {
    "synth": {f.name for f in dataclasses.fields(synthgen.DatasetConfig)}
             | {"n_subjects", "segs_per_subject", "seed"},
    "preprocess": {"quality_gate"},
    "model": {f.name for f in dataclasses.fields(model.ModelConfig)},
    "train": {f.name for f in dataclasses.fields(training.TrainConfig)},
    "eval": {"template_segment", "lam", "hrv_window_segments",
             "max_subjects"},
    "oracle": {"horizon", "true_delay", "flip_p", "mc_samples", "seed"},
}

_EVAL_DEFAULTS = {"template_segment": 0, "lam": 1e-3,
                  "hrv_window_segments": 3, "max_subjects": None}
_ORACLE_DEFAULTS = {"horizon": 5, "true_delay": 2, "flip_p": 0.0,
                    "mc_samples": 10 ** 6, "seed": 0}


def _load_run_config(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        _fail(EXIT_IO, f"cannot read {path}: {exc}")
        sys.exit(EXIT_IO)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: "
            f"{exc.msg}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    for section, body in doc.items():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"unknown config section {section!r}")
        unknown = set(body) - _SECTION_FIELDS[section]
        if unknown:
            raise ConfigError(
                f"unknown keys in [{section}]: {sorted(unknown)}")
    return doc


def _build(section_cls, body, **overrides):
    kwargs = dict(body)
    kwargs.update(overrides)
    # JSON arrays arrive as lists; frozen configs expect tuples
    for k, v in kwargs.items():
        if isinstance(v, list):
            kwargs[k] = tuple(v)
    try:
        return section_cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    return code


def _write_resolved(out_dir, doc):
    (Path(out_dir) / "resolved_config.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _apply_threads(threads):
    if threads is None:
        threads = os.environ.get("XMAE_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


@click.group()
@click.option("--threads", type=int, default=None,
              help="cap numeric worker threads (falls back to XMAE_THREADS)")
def main(threads):
    """Cross-modal masked pretraining on synthetic PPG/ECG pairs."""
    _apply_threads(threads)


@main.command("synth")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--force", is_flag=True, help="write into a non-empty dir")
def cmd_synth(config_path, out_dir, force):
    """Generate a paired synthetic corpus with ground-truth sidecars."""
    try:
        doc = _load_run_config(config_path)
        body = dict(doc.get("synth", {}))
        n_subjects = int(body.pop("n_subjects", 20))
        segs = int(body.pop("segs_per_subject", 5))
        seed = int(body.pop("seed", 77))
        cfg = _build(synthgen.DatasetConfig, body)
    except ConfigError as exc:
        sys.exit(_fail(EXIT_CONFIG, str(exc)))
    try:
        out = report.ensure_run_dir(out_dir, force=force)
        manifest = synthgen.gen_dataset(n_subjects, segs, cfg, seed, out)
        _write_resolved(out, doc)
    except FileExistsError as exc:
        sys.exit(_fail(EXIT_IO, str(exc)))
    except OSError as exc:
        sys.exit(_fail(EXIT_IO, str(exc)))
    n_segs = sum(len(s["files"]) for s in manifest["subjects"])
    click.echo(f"wrote {len(manifest['subjects'])} subjects, "
               f"{n_segs} segment pairs to {out}")


@main.command("pretrain")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--objective", type=click.Choice(["xmae", "mm"]), default=None)
@click.option("--mask", type=click.Choice(["contiguous", "random"]),
              default=None)
@click.option("--curriculum", type=click.Choice(["on", "off"]), default=None)
@click.option("--mask-ratio", type=float, default=None)
@click.option("--force", is_flag=True)
def cmd_pretrain(config_path, data_dir, out_dir, objective, mask,
                 curriculum, mask_ratio, force):
    """Pretrain the cross-modal model or the symmetric baseline."""
    try:
        doc = _load_run_config(config_path)
        overrides = {}
        if objective is not None:
            overrides["objective"] = \
                "mm_baseline" if objective == "mm" else "xmae"
        if mask is not None:
            overrides["mask_mode"] = mask
        if curriculum is not None:
            overrides["curriculum"] = curriculum == "on"
        if mask_ratio is not None:
            overrides["mask_ratio"] = mask_ratio
        cfg = _build(training.TrainConfig, doc.get("train", {}), **overrides)
        mcfg = _build(model.ModelConfig, doc.get("model", {}))
    except ConfigError as exc:
        sys.exit(_fail(EXIT_CONFIG, str(exc)))

    manifest_path = Path(data_dir) / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
        out = report.ensure_run_dir(out_dir, force=force)
    except (OSError, FileExistsError) as exc:
        sys.exit(_fail(EXIT_IO, str(exc)))
    except json.JSONDecodeError as exc:
        sys.exit(_fail(EXIT_CONFIG, f"{manifest_path}: {exc}"))

    _write_resolved(out, {"train": dataclasses.asdict(cfg),
                          "model": mcfg.to_dict()})
    try:
        summary = training.train(manifest, data_dir, cfg, mcfg, out)
    except training.NonFiniteGradient as exc:
        sys.exit(_fail(EXIT_NUMERIC, f"non-finite gradient: {exc}"))
    click.echo(f"best val loss {summary['best_val_loss']:.6e} "
               f"({summary['epochs_run']} epochs run)")


def _load_compatible(ckpt_path, manifest):
    try:
        meta, mcfg, params = training.load_model(ckpt_path)
    except OSError as exc:
        sys.exit(_fail(EXIT_IO, str(exc)))
    objective = meta.get("objective", "xmae")
    if objective not in ("xmae", "mm_baseline"):
        sys.exit(_fail(EXIT_COMPAT, f"unknown objective {objective!r}"))
    expected = int(round(manifest["fs"] * manifest["segment_s"]))
    if mcfg.seq_len != expected:
        sys.exit(_fail(EXIT_COMPAT,
                       f"checkpoint expects length {mcfg.seq_len}, "
                       f"corpus segments have {expected} samples"))
    return meta, mcfg, params, objective


def _iter_subject_segments(manifest, data_dir, max_subjects=None):
    subjects = manifest["subjects"]
    if max_subjects:
        subjects = subjects[:max_subjects]
    for entry in subjects:
        yield entry, list(entry["files"])


def _delay_suite(ckpts, manifest, data_dir, ecfg, out):
    tables = {}
    summary = {}
    fs = manifest["fs"]
    for label, (mcfg, params, objective) in ckpts.items():
        pairs = []
        for entry, stems in _iter_subject_segments(manifest, data_dir,
                                                   ecfg["max_subjects"]):
            if len(stems) < 2:
                continue
            t_stem = stems[ecfg["template_segment"]]
            ppg_t, ecg_t, _ = synthgen.load_pair(data_dir, t_stem)
            try:
                template = evalkit.extract_template(ppg_t, ecg_t)
            except evalkit.TemplateTooShort:
                continue
            for stem in stems:
                if stem == t_stem:
                    continue
                ppg, ecg, _ = synthgen.load_pair(data_dir, stem)
                rec, spliced, n_tpl = evalkit.reconstruct_ecg_from_ppg(
                    params, mcfg, ppg, template, objective=objective)
                try:
                    pairs.append(evalkit.segment_delay_pair(
                        ppg, ecg, rec, spliced, n_tpl, fs))
                except evalkit.NoPairs:
                    continue
        table = evalkit.delay_error_table(pairs)
        tables[label] = table
        summary[label] = {"median_delay_error_ms": table["median_ms"],
                          "n_segments": int(table["error_ms"].size)}
        report.write_delay_cdf_csv(out / f"delay_cdf_{label}.csv", table)
    report.plot_delay_cdfs(out / "delay_cdf.svg", tables)
    return summary


def _hrv_suite(ckpts, manifest, data_dir, ecfg, out):
    fs = manifest["fs"]
    win = ecfg["hrv_window_segments"]
    summary = {}
    for label, (mcfg, params, objective) in ckpts.items():
        windows = []
        for entry, stems in _iter_subject_segments(manifest, data_dir,
                                                   ecfg["max_subjects"]):
            if len(stems) < win + 1:
                continue
            t_stem = stems[ecfg["template_segment"]]
            ppg_t, ecg_t, _ = synthgen.load_pair(data_dir, t_stem)
            try:
                template = evalkit.extract_template(ppg_t, ecg_t)
            except evalkit.TemplateTooShort:
                continue
            gt_parts, rec_parts, ppg_parts = [], [], []
            for stem in stems[1:1 + win]:
                ppg, ecg, _ = synthgen.load_pair(data_dir, stem)
                rec, spliced, n_tpl = evalkit.reconstruct_ecg_from_ppg(
                    params, mcfg, ppg, template, objective=objective)
                gt_parts.append(ecg.samples)
                rec_parts.append(rec)
                ppg_parts.append(ppg.samples)
            cat = lambda parts: np.concatenate(parts)
            try:
                windows.append(evalkit.hrv_error_comparison(
                    WaveformSegment(cat(gt_parts), fs, Modality.ECG),
                    WaveformSegment(cat(rec_parts), fs, Modality.ECG),
                    WaveformSegment(cat(ppg_parts), fs, Modality.PPG)))
            except evalkit.TooFewBeats:
                continue
        report.write_hrv_errors_csv(out / f"hrv_errors_{label}.csv", windows)
        report.plot_hrv_error_cdfs(out / f"hrv_errors_{label}.svg", windows)
        dominance = {}
        for feature in windows[0]:
            wins = [w[feature]["rec"] <= w[feature]["ppg"] for w in windows]
            dominance[feature] = float(np.mean(wins))
        summary[label] = {"n_windows": len(windows),
                          "rec_no_worse_than_ppg_frac": dominance}
    return summary


def _probe_suite(ckpts, manifest, data_dir, ecfg, out):
    summary = {}
    for label, (mcfg, params, objective) in ckpts.items():
        emb, targets, sids = [], [], []
        for entry, stems in _iter_subject_segments(manifest, data_dir,
                                                   ecfg["max_subjects"]):
            for stem in stems:
                ppg, _, _ = synthgen.load_pair(data_dir, stem)
                emb.append(model.embed_ppg(params, mcfg, ppg.samples,
                                           objective=objective))
                targets.append(entry["delay_ms"])
                sids.append(entry["subject_id"])
        result = evalkit.probe_regression(np.asarray(emb),
                                          np.asarray(targets), sids,
                                          lam=ecfg["lam"])
        report.write_probe_csv(out / f"probe_{label}.csv", result)
        summary[label] = {"mae_mean": result.mean, "mae_sd": result.sd,
                          "per_fold": list(result.per_fold_metric)}
    return summary


def _recon_suite(ckpts, manifest, data_dir, ecfg, out):
    from . import masking

    summary = {}
    for label, (mcfg, params, objective) in ckpts.items():
        losses = []
        for entry, stems in _iter_subject_segments(manifest, data_dir,
                                                   ecfg["max_subjects"]):
            for i, stem in enumerate(stems):
                ppg, ecg, _ = synthgen.load_pair(data_dir, stem)
                m = masking.contiguous_mask(mcfg.n_patches, 0.90,
                                            rng_seed=i)
                if objective == "xmae":
                    pred, lm, _ = model.forward_xmae(
                        params, mcfg, ppg.samples, ecg.samples, m)
                else:
                    mp = masking.random_mask(mcfg.n_patches, 0.60,
                                             rng_seed=i + 1)
                    _, pred, _, lm = model.forward_mm_baseline(
                        params, mcfg, ppg.samples, ecg.samples, mp, m)
                err = (pred.data.reshape(-1) - ecg.samples) ** 2
                losses.append(float(err[lm.reshape(-1)].mean()))
        summary[label] = {"masked_mse_mean": float(np.mean(losses)),
                          "masked_mse_sd": float(np.std(losses)),
                          "n_segments": len(losses)}
    (out / "recon.csv").write_text(
        "label,masked_mse_mean,masked_mse_sd\n" + "".join(
            f"{k},{v['masked_mse_mean']:.8e},{v['masked_mse_sd']:.8e}\n"
            for k, v in summary.items()))
    return summary


@main.command("eval")
@click.option("--checkpoint", "ckpt_paths", type=click.Path(),
              multiple=True, required=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--suite", type=click.Choice(["delay", "hrv", "probe",
                                            "recon"]), required=True)
@click.option("--force", is_flag=True)
def cmd_eval(ckpt_paths, config_path, data_dir, out_dir, suite, force):
    """Run an evaluation suite over one or more checkpoints."""
    try:
        doc = _load_run_config(config_path)
        ecfg = dict(_EVAL_DEFAULTS)
        ecfg.update(doc.get("eval", {}))
    except ConfigError as exc:
        sys.exit(_fail(EXIT_CONFIG, str(exc)))
    try:
        manifest = json.loads(
            (Path(data_dir) / "manifest.json").read_text())
        out = report.ensure_run_dir(out_dir, force=force)
    except (OSError, FileExistsError) as exc:
        sys.exit(_fail(EXIT_IO, str(exc)))

    ckpts = {}
    for path in ckpt_paths:
        meta, mcfg, params, objective = _load_compatible(path, manifest)
        label = objective if objective not in ckpts else Path(path).stem
        ckpts[label] = (mcfg, params, objective)

    _write_resolved(out, {"eval": ecfg})
    runner = {"delay": _delay_suite, "hrv": _hrv_suite,
              "probe": _probe_suite, "recon": _recon_suite}[suite]
    summary = runner(ckpts, manifest, data_dir, ecfg, out)
    (out / "summary.json").write_text(
        json.dumps({"suite": suite, "results": summary}, indent=2,
                   sort_keys=True) + "\n")
    click.echo(json.dumps({"suite": suite, "results": summary},
                          sort_keys=True))


@main.command("oracle")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--mc-check", is_flag=True,
              help="append a Monte-Carlo cross-check column")
@click.option("--force", is_flag=True)
def cmd_oracle(config_path, out_dir, mc_check, force):
    """Enumerate the delay-identifiability scenarios and write risk
    curves plus a summary."""
    try:
        doc = _load_run_config(config_path)
        ocfg = dict(_ORACLE_DEFAULTS)
        ocfg.update(doc.get("oracle", {}))
    except ConfigError as exc:
        sys.exit(_fail(EXIT_CONFIG, str(exc)))
    try:
        out = report.ensure_run_dir(out_dir, force=force)
    except (OSError, FileExistsError) as exc:
        sys.exit(_fail(EXIT_IO, str(exc)))

    horizon = int(ocfg["horizon"])
    true_delay = int(ocfg["true_delay"])
    try:
        tp = oracle.ToyProcess(
            n_states=2, transition=((0.1, 0.9), (0.9, 0.1)),
            horizon=horizon, delay=true_delay,
            emit_e=(0.0, 1.0), emit_p=(0.0, 1.0),
            noise_flip_p=float(ocfg["flip_p"]))
        visible = frozenset({0})
        curve = oracle.identifiability_scan(tp, visible, range(horizon))
        mc = None
        if mc_check:
            mc = [oracle.mc_risk_cross(tp, visible, d,
                                       n_samples=int(ocfg["mc_samples"]),
                                       seed=int(ocfg["seed"]))
                  for d in curve.assumed_delays]

        # delay-blind scenario: deterministic period-2 chain, both
        # modalities alternately masked
        flip_chain = ((0.0, 1.0), (1.0, 0.0))
        mm_risks = []
        for d in range(min(4, horizon)):
            tpd = oracle.ToyProcess(2, flip_chain, min(horizon, 4), d,
                                    (0.0, 1.0), (0.0, 1.0))
            mm_risks.append(oracle.bayes_risk_mm(tpd, {0, 2}, {1, 3}))
    except oracle.TooLarge as exc:
        sys.exit(_fail(EXIT_GUARD, str(exc)))
    except oracle.ConstructionViolation as exc:
        sys.exit(_fail(EXIT_CONFIG, str(exc)))

    report.write_risk_curve_csv(out / "risk_curve.csv", curve, mc=mc)
    report.plot_risk_curve(out / "risk_curve.svg", curve,
                           true_delay=true_delay)
    summary = curve.summary(true_delay)
    spread = max(abs(a - b) for pair in mm_risks for a, b in [pair])
    mm_flat = max(r for pair in mm_risks for r in pair) \
        - min(r for pair in mm_risks for r in pair)
    summary["same_modality_risk_spread_over_delays"] = mm_flat
    summary["cross_input_gain_under_self_sufficiency"] = spread
    _write_resolved(out, {"oracle": ocfg})
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    click.echo(json.dumps(summary, sort_keys=True))


if __name__ == "__main__":
    main()
