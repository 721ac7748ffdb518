"""Command-line front end: simulate, match, estimate, sensitivity, report.

Stages talk through files in ``--out-dir``; every command writes its
artifacts atomically plus a ``manifest_<command>.json`` describing inputs,
resolved configuration, library versions, output checksums and counts.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from . import __version__, diagnostics, inference, matching, simulation
from .data_model import DataError, apply_filters, load_cases, write_cases
from .instrument import compute_severity, severity_summary, write_instrument

log = logging.getLogger("nearfar")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_SCHEMA = 2
EXIT_WEAK = 3
EXIT_MISSING = 4

CASES_FILE = "cases.csv"
TRUTH_FILE = "ground_truth.json"
PAIRS_FILE = "pairs.csv"
TRACE_FILE = "grid_trace.csv"
DROPPED_FILE = "dropped.csv"
INSTRUMENT_FILE = "instrument.csv"
ESTIMATES_CSV = "estimates.csv"
ESTIMATES_TXT = "estimates.txt"
BALANCE_CSV = "balance.csv"
BALANCE_TXT = "balance.txt"
GENERAL_CSV = "generalizability.csv"
GENERAL_TXT = "generalizability.txt"
SENSITIVITY_CSV = "sensitivity.csv"
AMPLIFY_CSV = "amplification.csv"
REPORT_FILE = "report.txt"


class MissingArtifact(Exception):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    input: Optional[str] = None
    out_dir: str = "."
    seed: int = 0
    alpha: float = 0.05
    threads: int = 1
    sink_fractions: tuple[float, ...] = matching.DEFAULT_SINK_FRACTIONS
    delta_quantiles: tuple[float, ...] = matching.DEFAULT_DELTA_QUANTILES
    deltas: Optional[tuple[float, ...]] = None
    weak_instrument_alpha: Optional[float] = 0.01
    gammas: tuple[float, ...] = inference.DEFAULT_GAMMAS
    schemes: tuple[str, ...] = inference.SCHEMES
    scenario: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if any(g < 1 for g in self.gammas):
            raise ConfigError("gammas must be >= 1")
        unknown = set(self.schemes) - set(inference.SCHEMES)
        if unknown:
            raise ConfigError(f"unknown schemes: {sorted(unknown)}")
        known = {f.name for f in dataclasses.fields(simulation.SimScenario)} - {"seed"}
        extra = set(self.scenario) - known
        if extra:
            raise ConfigError(f"unknown scenario keys: {sorted(extra)}")

    @property
    def grid(self) -> matching.SearchGrid:
        return matching.SearchGrid(tuple(self.sink_fractions), tuple(self.delta_quantiles),
                                   None if self.deltas is None else tuple(self.deltas),
                                   self.weak_instrument_alpha)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


_TUPLE_FIELDS = {"sink_fractions", "delta_quantiles", "deltas", "gammas", "schemes"}


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file values, then command-line flags on top."""
    values = load_config(args.config)
    for name in ("input", "out_dir", "seed", "alpha", "threads"):
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if getattr(args, "n_cases", None) is not None:
        values.setdefault("scenario", {})
        values["scenario"] = {**values["scenario"], "n_cases": args.n_cases}
    for k in _TUPLE_FIELDS & set(values):
        if values[k] is not None:
            values[k] = tuple(values[k])
    try:
        cfg = RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    cfg.validate()
    return cfg


# file plumbing -------------------------------------------------------------

def atomic_write(path: Path, write: Callable[[Path], None]) -> None:
    """Produce ``path`` via a temporary sibling and an atomic rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        write(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_text(path: Path, text: str) -> None:
    atomic_write(path, lambda p: p.write_text(text, encoding="utf-8"))


def atomic_frame(path: Path, frame: pd.DataFrame) -> None:
    atomic_write(path, lambda p: frame.to_csv(p, index=False, lineterminator="\n",
                                              float_format="%.17g"))


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import numba
    import scipy
    return {"nearfar": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__,
            "numba": numba.__version__}


def write_manifest(cfg: RunConfig, command: str, inputs: dict[str, Path],
                   outputs: list[str], counts: dict) -> None:
    out = Path(cfg.out_dir)
    config = cfg.as_dict()
    config.pop("out_dir")
    if config.get("input"):
        config["input"] = os.path.relpath(config["input"], out)
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: {"path": os.path.relpath(v, out), "sha256": sha256(v)}
                   for k, v in sorted(inputs.items())},
        "outputs": {name: sha256(out / name) for name in sorted(outputs)},
        "counts": counts,
        "versions": _versions(),
    }
    atomic_text(out / f"manifest_{command}.json",
                json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def _input_path(cfg: RunConfig) -> Path:
    if cfg.input is None:
        # fall back to what the match stage recorded
        manifest = Path(cfg.out_dir) / "manifest_match.json"
        if manifest.exists():
            rel = json.loads(manifest.read_text())["inputs"]["cases"]["path"]
            return _require(Path(cfg.out_dir) / rel, "input cases file")
        raise MissingArtifact("no --input given and no match manifest to take it from")
    return _require(Path(cfg.input), "input cases file")


def _load_analysis(cfg: RunConfig):
    path = _input_path(cfg)
    analysis = apply_filters(load_cases(path))
    for w in analysis.warnings:
        log.warning(w)
    return path, analysis


# commands ------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> dict:
    out = Path(cfg.out_dir)
    scenario = simulation.SimScenario(**{**cfg.scenario, "seed": cfg.seed})
    records, truth = simulation.generate(scenario)
    atomic_write(out / CASES_FILE, lambda p: write_cases(records, p))
    atomic_write(out / TRUTH_FILE, lambda p: simulation.write_truth(truth, p))
    counts = {"cases": len(records), "compliers": truth.n_compliers}
    write_manifest(cfg, "simulate", {}, [CASES_FILE, TRUTH_FILE], counts)
    return counts


def cmd_match(cfg: RunConfig) -> dict:
    out = Path(cfg.out_dir)
    path, analysis = _load_analysis(cfg)
    instrument = compute_severity(analysis)
    strata = matching.stratify(analysis, instrument)
    cal = matching.calibrate_and_match(strata, analysis, instrument, cfg.grid, cfg.threads)
    summary = cal.summary
    atomic_write(out / PAIRS_FILE, lambda p: matching.write_pairs(summary, p))
    atomic_write(out / TRACE_FILE, lambda p: matching.write_trace(cal.trace, p))
    atomic_write(out / INSTRUMENT_FILE, lambda p: write_instrument(instrument, p))
    dropped = [(c, why) for c, why in sorted(summary.drop_reasons.items())]
    dropped += [(c, "ineligible") for c in sorted(cal.ineligible)]
    atomic_frame(out / DROPPED_FILE, pd.DataFrame(dropped, columns=["case_id", "reason"]))
    sel = cal.selected
    counts = {
        "cases_analyzed": len(analysis),
        "filtered": dict(analysis.provenance),
        "ineligible": len(cal.ineligible),
        "strata": len(strata),
        "pairs": len(summary.pairs),
        "cases_matched": cal.cases_matched,
        "selected": {"sink_fraction": sel.sink_fraction, "delta": sel.delta,
                     "delta_quantile": sel.delta_quantile, "global_F": sel.global_F},
        "severity": severity_summary(instrument),
    }
    write_manifest(cfg, "match", {"cases": path},
                   [PAIRS_FILE, TRACE_FILE, INSTRUMENT_FILE, DROPPED_FILE], counts)
    return counts


def _load_pairs(cfg: RunConfig, analysis):
    out = Path(cfg.out_dir)
    pairs = matching.read_pairs(_require(out / PAIRS_FILE, "matched pairs (run `match` first)"))
    known = analysis.by_id
    missing = [c for p in pairs for c in (p.encouraged, p.unencouraged) if c not in known]
    if missing:
        raise DataError(f"pairs file refers to {len(missing)} case(s) not in the input, "
                        f"e.g. {missing[0]!r}")
    return pairs


def cmd_estimate(cfg: RunConfig) -> dict:
    out = Path(cfg.out_dir)
    path, analysis = _load_analysis(cfg)
    pairs = _load_pairs(cfg, analysis)
    instrument = compute_severity(analysis)
    outcomes = inference.PairOutcomes.from_pairs(pairs, analysis, instrument)
    rows = inference.stratified_estimates(outcomes, cfg.schemes, cfg.alpha)
    atomic_frame(out / ESTIMATES_CSV, inference.estimates_frame(rows))
    atomic_text(out / ESTIMATES_TXT, inference.render_estimates(rows))
    balance = diagnostics.balance_table(pairs, analysis, instrument)
    atomic_frame(out / BALANCE_CSV, diagnostics.balance_frame(balance))
    atomic_text(out / BALANCE_TXT, diagnostics.render_balance(balance))
    general = diagnostics.generalizability_report(pairs, analysis)
    atomic_frame(out / GENERAL_CSV, diagnostics.generalizability_frame(general))
    atomic_text(out / GENERAL_TXT, diagnostics.render_generalizability(general))
    agg = rows[0] if rows and rows[0].stratum_label == "Aggregate" else None
    counts = {
        "cases_analyzed": len(analysis),
        "cases_matched": 2 * len(pairs),
        "pairs": len(pairs),
        "aggregate": None if agg is None else {
            "estimate": agg.lambda_hat, "ci_low": agg.ci_low, "ci_high": agg.ci_high,
            "first_stage_F": agg.first_stage_F},
        "max_covariate_std_diff": diagnostics.max_covariate_std_diff(balance),
        "generalizability_flags": list(general.flagged),
    }
    write_manifest(cfg, "estimate", {"cases": path, "pairs": out / PAIRS_FILE},
                   [ESTIMATES_CSV, ESTIMATES_TXT, BALANCE_CSV, BALANCE_TXT, GENERAL_CSV,
                    GENERAL_TXT], counts)
    return counts


def cmd_sensitivity(cfg: RunConfig) -> dict:
    out = Path(cfg.out_dir)
    path, analysis = _load_analysis(cfg)
    pairs = _load_pairs(cfg, analysis)
    instrument = compute_severity(analysis)
    outcomes = inference.PairOutcomes.from_pairs(pairs, analysis, instrument)
    result = inference.sensitivity_analysis(outcomes, cfg.gammas, cfg.alpha)
    atomic_frame(out / SENSITIVITY_CSV, result.frame())
    curve = []
    if result.gamma_star is not None:
        curve = [(result.gamma_star, lam, delta) for lam, delta in inference.amplify(result.gamma_star)]
    atomic_frame(out / AMPLIFY_CSV, pd.DataFrame(curve, columns=["gamma", "Lambda", "Delta"]))
    counts = {"pairs": len(pairs), "gamma_star": result.gamma_star,
              "p_value": inference.primary_p_value(outcomes)}
    write_manifest(cfg, "sensitivity", {"cases": path, "pairs": out / PAIRS_FILE},
                   [SENSITIVITY_CSV, AMPLIFY_CSV], counts)
    return counts


def cmd_report(cfg: RunConfig) -> dict:
    out = Path(cfg.out_dir)
    needed = {name: _require(out / name, f"{name} (run the earlier stages first)")
              for name in ("manifest_match.json", ESTIMATES_TXT, BALANCE_TXT, GENERAL_TXT,
                           SENSITIVITY_CSV, AMPLIFY_CSV, "manifest_estimate.json",
                           "manifest_sensitivity.json")}
    match = json.loads(needed["manifest_match.json"].read_text())["counts"]
    est = json.loads(needed["manifest_estimate.json"].read_text())["counts"]
    sens = json.loads(needed["manifest_sensitivity.json"].read_text())["counts"]
    sel = match["selected"]
    buf = io.StringIO()
    w = buf.write
    w("NEAR-FAR MATCHED ANALYSIS REPORT\n\n")
    w(f"Cases analyzed: {match['cases_analyzed']:,}\n")
    for name, n in match["filtered"].items():
        w(f"  removed by {name}: {n:,}\n")
    w(f"Cases without a defined instrument: {match['ineligible']:,}\n")
    w(f"Exact-match strata: {match['strata']:,}\n")
    w(f"Cases matched: {match['cases_matched']:,} ({match['pairs']:,} pairs)\n")
    w(f"Selected sink fraction {sel['sink_fraction']}, caliper {sel['delta']:.4g}"
      + (f" (quantile {sel['delta_quantile']})" if sel["delta_quantile"] is not None else "")
      + f", first-stage F {sel['global_F']:.4g}\n\n")
    w("Estimated effect of setting bail on conviction\n")
    w(needed[ESTIMATES_TXT].read_text())
    w("* 95% interval excludes 0\n")
    agg = est["aggregate"]
    if agg is not None and math.isfinite(agg["estimate"]):
        w(f"Among defendants whose bail depends on the judge, setting bail adds about "
          f"{100 * agg['estimate']:.0f} convictions per 100 cases.\n")
    w("\n")
    w("Post-match standardized differences\n")
    w(needed[BALANCE_TXT].read_text())
    w(f"Largest covariate standardized difference: {est['max_covariate_std_diff']:.3f}\n\n")
    w("Generalizability\n")
    w(needed[GENERAL_TXT].read_text())
    w("\nSensitivity analysis\n")
    w(f"One-sided p-value (no hidden bias): {sens['p_value']:.3g}\n")
    if sens["gamma_star"] is None:
        w("The effect is not significant even without hidden bias.\n")
    else:
        g = sens["gamma_star"]
        w(f"Largest Gamma still significant: {g}\n")
        curve = pd.read_csv(needed[AMPLIFY_CSV])
        if len(curve):
            w("Equivalent (Lambda, Delta) pairs for that Gamma:\n")
            for r in curve.iloc[:: max(1, len(curve) // 8)].itertuples(index=False):
                w(f"  Lambda {r.Lambda:.3f}  Delta {r.Delta:.3f}\n")
    atomic_text(out / REPORT_FILE, buf.getvalue())
    counts = {"report_bytes": len(buf.getvalue().encode())}
    inputs = {name: path for name, path in needed.items() if not name.startswith("manifest")}
    write_manifest(cfg, "report", inputs, [REPORT_FILE], counts)
    return counts


COMMANDS = {
    "simulate": cmd_simulate,
    "match": cmd_match,
    "estimate": cmd_estimate,
    "sensitivity": cmd_sensitivity,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nearfar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--input", help="cases file (delimited, with header)")
        p.add_argument("--out-dir", dest="out_dir", help="artifact directory")
        p.add_argument("--config", help="JSON file of RunConfig keys; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--threads", type=int)
        if name == "simulate":
            p.add_argument("--n-cases", dest="n_cases", type=int)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        counts = COMMANDS[args.command](cfg)
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (DataError, ConfigError, simulation.ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SCHEMA
    except (matching.WeakInstrumentError, inference.NoComplianceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_WEAK
    except Exception as e:  # noqa: BLE001 - last-resort exit status
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_OTHER
    print(json.dumps(counts, sort_keys=True, default=_json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
