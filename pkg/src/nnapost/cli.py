"""Command line driver: ``nnapost run``, ``nnapost verify`` and ``nnapost export-mesh``.

Set ``NNAPOST_NUM_THREADS`` to cap the number of BLAS/OpenMP threads; it must
be read before numpy is first imported, which is why it is handled at the top
of this module.
"""

from __future__ import annotations

import os

_threads = os.environ.get("NNAPOST_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import json  # noqa: E402
import re  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, dataclass, field, fields  # noqa: E402
from pathlib import Path  # noqa: E402

from .adaptivity import TELEMETRY_COLUMNS, AdaptConfig, train_adaptive  # noqa: E402
from .losses import LOSS_KINDS, ErrorEvaluator, LossSpec, evaluate  # noqa: E402
from .mesh import (  # noqa: E402
    make_boundary_layer_mesh,
    make_crisscross_unit_square,
    make_lshape_rotated,
    mesh_from_text,
    mesh_to_text,
)
from .network import init, load_checkpoint, save_checkpoint  # noqa: E402
from .quadrature import tri_rule  # noqa: E402
from .trialfn import bubble_mask, manufactured  # noqa: E402

EXPERIMENTS = ("smooth_compare", "eta_vs_etarho", "enforce_bc", "adaptive_quadrature", "lshape")

# Values that differ from the RunConfig field defaults, per experiment.
_DEFAULTS = {
    "smooth_compare": {},
    "eta_vs_etarho": {"losses": ["wb", "wb_eta_only"]},
    "enforce_bc": {"N": 30, "losses": ["wb"], "iterations": 3000},
    "adaptive_quadrature": {"losses": ["wb"], "mesh_n": 1, "adaptive": True, "iterations": 4000},
    "lshape": {"L": 8, "losses": ["wb"], "tau1": 0.2, "tau2": 0.75, "adaptive": True, "iterations": 12000,
               "lshape_refinements": 2},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """One experiment run, read from a flat JSON document.

    Keys left out take the per-experiment defaults; an empty document runs
    ``smooth_compare``.  ``mesh_n`` is the crisscross subdivision for the
    square problems, ``lshape_refinements`` the number of uniform
    refinements of the initial L-shape mesh.  ``adaptive`` switches on
    quadrature-driven refinement; with ``twin`` a fixed-mesh run with the
    same seed is made next to every adaptive one.
    """

    experiment: str = "smooth_compare"
    L: int = 5
    N: int = 20
    seed: int = 0
    losses: list = field(default_factory=lambda: ["wb", "br", "pmod", "pinn"])
    iterations: int = 1500
    mesh_n: int = 4
    lshape_refinements: int = 2
    error_mesh_n: int = 8
    adaptive: bool = False
    twin: bool = True
    tau1: float = 0.3
    tau2: float = 0.7
    max_elements: int = 20000
    loss_threshold: float | None = None
    output_dir: str = "runs"

    @classmethod
    def from_json_text(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(raw, dict):
            raise ConfigError("line 1: the config must be a JSON object")
        types = {f.name: f.type for f in fields(cls)}
        problems = []
        for key, value in raw.items():
            where = f"line {_line_of(text, key)}, field {key!r}"
            if key not in types:
                problems.append(f"{where}: unknown key")
            elif not _type_ok(types[key], value):
                problems.append(f"{where}: expected {types[key]}, got {type(value).__name__}")
        experiment = raw.get("experiment", cls.experiment)
        if experiment not in EXPERIMENTS:
            problems.append(f"line {_line_of(text, 'experiment')}, field 'experiment': "
                            f"must be one of {', '.join(EXPERIMENTS)}")
        if problems:
            raise ConfigError("\n".join(problems))
        values = dict(_DEFAULTS[experiment])
        values.update(raw)
        cfg = cls(**values)
        bad = [k for k in cfg.losses if k not in LOSS_KINDS]
        if bad:
            raise ConfigError(f"line {_line_of(text, 'losses')}, field 'losses': unknown loss kinds {bad}")
        if cfg.adaptive and "pinn" in cfg.losses:
            raise ConfigError(f"line {_line_of(text, 'adaptive')}, field 'adaptive': pinn cannot be refined")
        try:
            AdaptConfig(cfg.tau1, cfg.tau2, cfg.iterations)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _type_ok(annotation: str, value) -> bool:
    if value is None:
        return "None" in annotation
    if annotation.startswith("int"):
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation.startswith("float"):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation == "bool":
        return isinstance(value, bool)
    if annotation == "str":
        return isinstance(value, str)
    if annotation == "list":
        return isinstance(value, list) and all(isinstance(v, str) for v in value)
    return False


# ----------------------------------------------------------------- runs


def _problem_and_mesh(cfg: RunConfig):
    if cfg.experiment == "lshape":
        from .acceptance import lshape_error_mesh

        prob = manufactured("lshape_singular")
        return prob, make_lshape_rotated(cfg.lshape_refinements), ErrorEvaluator(prob, lshape_error_mesh(),
                                                                                   tri_rule("standard"))
    if cfg.experiment == "enforce_bc":
        prob = manufactured("boundary_layer")
        mesh = make_boundary_layer_mesh()
        return prob, mesh, None
    prob = manufactured("smooth_square")
    return prob, make_crisscross_unit_square(cfg.mesh_n), ErrorEvaluator(prob, make_crisscross_unit_square(
        cfg.error_mesh_n))


def _plan(cfg: RunConfig):
    """``(run name, loss kind, masked, adaptive)`` for every training run."""
    runs = []
    for kind in cfg.losses:
        if cfg.experiment == "enforce_bc":
            runs += [(kind, kind, False, cfg.adaptive), (f"{kind}_masked", kind, True, cfg.adaptive)]
        elif cfg.adaptive:
            runs.append((f"{kind}_adaptive", kind, False, True))
            if cfg.twin:
                runs.append((f"{kind}_fixed", kind, False, False))
        else:
            runs.append((kind, kind, False, False))
    return runs


def vega_lite_spec(csv_name: str, title: str) -> dict:
    """Plot description for the error and the ratio over iterations."""
    def layer(y, scale):
        return {
            "mark": "line",
            "encoding": {
                "x": {"field": "iter", "type": "quantitative", "title": "iteration"},
                "y": {"field": y, "type": "quantitative", "scale": {"type": scale}},
            },
        }

    return {
        "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
        "title": title,
        "data": {"url": csv_name, "format": {"type": "csv"}},
        "hconcat": [layer("h1_error", "log"), layer("ratio", "linear")],
    }


def run(cfg: RunConfig, echo=print) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    prob, mesh0, err = _problem_and_mesh(cfg)
    for name, kind, masked, adaptive in _plan(cfg):
        mask = bubble_mask if masked else None
        error = err if err is not None else ErrorEvaluator(prob, mesh0, mask=mask)
        spec = LossSpec(kind, seed=cfg.seed)
        config = AdaptConfig(cfg.tau1, cfg.tau2, cfg.iterations, cfg.loss_threshold, cfg.max_elements,
                             enabled=adaptive)
        csv_path = out / f"{name}.csv"
        result = train_adaptive(init(cfg.L, cfg.N, cfg.seed), mesh0, spec, prob, config, error=error, mask=mask,
                                csv_path=csv_path)
        (out / f"{name}.vl.json").write_text(json.dumps(vega_lite_spec(csv_path.name, name), indent=2) + "\n")
        report_spec = spec if spec.estimator_based else LossSpec("wb")
        _, report, _ = evaluate(report_spec, prob, result.params, result.mesh, mask=mask)
        (out / f"{name}_report.json").write_text(report.to_json(indent=2) + "\n")
        text = mesh_to_text(result.mesh)
        (out / f"{name}_mesh.txt").write_text(text)
        save_checkpoint(out / f"{name}.ckpt", result.params, seed=cfg.seed, iteration=len(result.telemetry),
                        experiment=cfg.experiment, loss=kind, masked=masked, mesh=text)
        last = result.telemetry[-1] if result.telemetry else {}
        echo(f"{name}: {len(result.telemetry)} iterations, loss {last.get('loss', float('nan')):.3e}, "
             f"H1 error {last.get('h1_error', float('nan')):.3e}, {result.mesh.n_elements} elements")
    return 0


def export_mesh(ckpt: str, dest: str) -> int:
    _, header = load_checkpoint(ckpt)
    if "mesh" not in header:
        raise SystemExit(f"{ckpt} carries no mesh")
    mesh_from_text(header["mesh"])  # validate before writing
    Path(dest).write_text(header["mesh"])
    return 0


def verify(quick: bool = False, fault: str | None = None, echo=print) -> int:
    from .acceptance import run_all

    results = run_all(include_training=not quick, echo=echo, fault=fault)
    failed = [r for r in results if not r.passed]
    echo(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnapost", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="train networks for one experiment")
    p_run.add_argument("--config", required=True, help="flat JSON run configuration")
    p_ver = sub.add_parser("verify", help="run the invariant suites and acceptance criteria")
    p_ver.add_argument("--quick", action="store_true", help="skip the training criteria")
    p_ver.add_argument("--inject-fault", choices=["quadrature"], default=None,
                       help="corrupt a quadrature rule to check that verification fails")
    p_exp = sub.add_parser("export-mesh", help="write the mesh stored in a checkpoint")
    p_exp.add_argument("--in", dest="ckpt", required=True)
    p_exp.add_argument("--out", dest="dest", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        try:
            cfg = RunConfig.from_json_text(Path(args.config).read_text())
        except ConfigError as exc:
            print(f"{args.config}: {exc}", file=sys.stderr)
            return 2
        return run(cfg)
    if args.command == "verify":
        return verify(args.quick, args.inject_fault)
    return export_mesh(args.ckpt, args.dest)


if __name__ == "__main__":
    sys.exit(main())
