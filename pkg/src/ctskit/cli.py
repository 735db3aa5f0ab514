"""Command-line experiment runner.

Every subcommand reads its inputs, writes its artifacts into ``--out`` and
finishes with ``summary.json`` (input hashes, package version, pass/fail per
check). Exit status: 0 all checks passed, 1 a check failed (artifacts are
still written), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CtsKitError, ParameterError, ParseError

logger = logging.getLogger("ctskit")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "refiner_url": None,
    "refiner_token_env": "CTSKIT_REFINER_TOKEN",
    "oracle": None,
    "max_iter": 20,
    "eps_overlap": 1e-6,
    "sweep": "12,25,50,100,200",
    "s": 400,
    "n_states": 64,
    "gaps": "25,50,100,200",
    "seeds": 50,
    "cond": None,
    "theta0": None,
    "iters": 1000,
    "lr": 1e-2,
    "t_cut": 100,
    "noise_removal": "iteration",
    "bounds": "0,0,4,4",
    "n": 24,
    "margin": 0.3,
    "h_min": 1.0,
    "h_max": 2.0,
    "d_min": 1.0,
    "steps": 300,
    "res": 16,
    "pattern": "checker",
    "target": None,
    "tau": 0.3,
    "static": "",
    "width": None,
    "height": None,
}


# ----------------------------------------------------------- plumbing


def stream(seed, label):
    """Generator for one labelled purpose; labels never perturb each other."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    text = p.read_bytes()
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            doc = tomllib.loads(text.decode())
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"bad TOML: {exc}", str(p)) from exc
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad JSON: {exc}", str(p)) from exc
    if not isinstance(doc, dict):
        raise ParseError("config must be a table/object", str(p))
    return {k.replace("-", "_"): v for k, v in doc.items()}


class Run:
    """Per-invocation context: resolved options, inputs, artifacts and checks."""

    def __init__(self, args, command):
        self.args = args
        self.command = command
        self.config = load_config(args.config)
        if args.config:
            self.inputs = {"config": sha256_file(args.config)}
        else:
            self.inputs = {}
        self.out = Path(self.opt("out"))
        self.checks = {}
        self.artifacts = []
        self.extra = {}

    def opt(self, name):
        v = getattr(self.args, name, None)
        if v is not None:
            return v
        if name in self.config:
            return self.config[name]
        return DEFAULTS.get(name)

    @property
    def seed(self):
        return int(self.opt("seed"))

    def rng(self, label):
        return stream(self.seed, f"{self.command}:{label}")

    def input(self, label, path):
        if path is None:
            raise ParameterError(f"--{label.replace('_', '-')} is required")
        self.inputs[label] = sha256_file(path)
        return Path(path)

    def write(self, name, data):
        atomic_write(self.out / name, data)
        self.artifacts.append(name)

    def check(self, name, ok):
        self.checks[name] = bool(ok)

    def finish(self):
        summary = {
            "command": self.command,
            "version": __version__,
            "seed": self.seed,
            "inputs": self.inputs,
            "artifacts": sorted(self.artifacts),
            "checks": self.checks,
            "passed": all(self.checks.values()),
            "results": self.extra,
        }
        atomic_write(self.out / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return EXIT_OK if summary["passed"] else EXIT_FAIL


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


# ------------------------------------------------------------- oracle


def default_oracle():
    from .diffusion import GaussianMixtureOracle

    return GaussianMixtureOracle([0.5, 0.5], [[2.0, 0.0], [-2.0, 0.0]], 0.25)


def _oracle(run):
    from .diffusion import GaussianMixtureOracle

    path = run.opt("oracle")
    if path is None:
        return default_oracle()
    return GaussianMixtureOracle.from_json(run.input("oracle", path).read_text())


def _cond(run):
    from .diffusion import UNCOND, Condition

    c = run.opt("cond")
    if c is None or c == "":
        return UNCOND
    return Condition.subset(*_ints(c))


# ------------------------------------------------------------- layout


def _layout(run):
    from .layout import parse_layout

    return parse_layout(run.input("layout", run.opt("layout")).read_text())


def cmd_layout_validate(run):
    from .layout import validate

    rep = validate(_layout(run), float(run.opt("eps_overlap")))
    run.write("violations.json", rep.to_json() + "\n")
    run.check("no_violations", not rep)
    run.extra["violations"] = len(rep)


def cmd_layout_refine(run):
    from .layout import refine_loop, serialize_layout
    from .refiner import RemoteRefiner

    h = _layout(run)
    refiner = None
    if run.opt("refiner_url"):
        refiner = RemoteRefiner(run.opt("refiner_url"), run.opt("refiner_token_env"))
    res = refine_loop(h, refiner, int(run.opt("max_iter")), float(run.opt("eps_overlap")))
    run.write("layout_refined.json", serialize_layout(res.layout))
    run.write("violations.json", res.report.to_json() + "\n")
    mono = all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))
    run.check("converged", not res.report)
    run.check("overlap_non_increasing", mono)
    run.extra.update(rounds=res.iterations, overlap_history=res.history)


def cmd_layout_orient(run):
    from .layout import assign_orientations, group_references, serialize_layout

    h = assign_orientations(_layout(run))
    run.write("layout_oriented.json", serialize_layout(h))
    run.check("all_yaws_set", all(b.yaw is not None for b in h.boxes()))
    run.check("idempotent", assign_orientations(h) == h)
    run.extra["references"] = {",".join(k): v for k, v in group_references(h).items()}


def cmd_layout_export(run):
    from .layout import count_faces, export_planar_mesh

    h = _layout(run)
    text = export_planar_mesh(h)
    run.write("mesh.obj", text)
    run.check("deterministic", export_planar_mesh(h) == text)
    run.extra["faces"] = count_faces(text)


# ------------------------------------------------------------- camera


def cmd_camera_zigzag(run):
    from .geometry import (ZigzagParams, center_rotation_trajectory, check_trajectory,
                           trajectory_to_json, view_angle_to_wall, zigzag_trajectory)

    bounds = tuple(_floats(run.opt("bounds")))
    if len(bounds) != 4:
        raise ParameterError("--bounds needs x0,y0,x1,y1")
    params = ZigzagParams(margin=float(run.opt("margin")), h_min=float(run.opt("h_min")),
                          h_max=float(run.opt("h_max")), d_min=float(run.opt("d_min")))
    n = int(run.opt("n"))
    wps = zigzag_trajectory(bounds, n, params)
    run.write("trajectory.json", trajectory_to_json(wps))
    run.check("trajectory_constraints", not check_trajectory(wps, bounds, params))
    base = center_rotation_trajectory(bounds, n, params)
    run.extra["max_view_angle_deg"] = max(view_angle_to_wall(w, bounds) for w in wps)
    run.extra["baseline_max_view_angle_deg"] = max(view_angle_to_wall(w, bounds) for w in base)


# ---------------------------------------------------------------- cts


def cmd_cts_theorem1(run):
    from .consistency import ConsistencyCoeffs, decomposition_sweep
    from .diffusion import UNCOND, GaussianMixtureOracle, build_schedule

    gm = _oracle(run)
    cond = _cond(run)
    sched = build_schedule()
    coeffs = ConsistencyCoeffs()
    rng = run.rng("states")
    n = int(run.opt("n_states"))
    comp = rng.choice(gm.n_components, size=n, p=gm.weights)
    x_pi = gm.means[comp] + np.sqrt(gm.variances[comp]) * rng.standard_normal((n, gm.dim))
    eps = rng.standard_normal((n, gm.dim))
    dts = _ints(run.opt("sweep"))
    s = int(run.opt("s"))
    res = decomposition_sweep(x_pi, eps, s, dts, cond, gm, sched, coeffs)
    run.write("theorem1.csv", res.to_csv())
    pm = GaussianMixtureOracle.point_mass(gm.means[0])
    pm_res = decomposition_sweep(x_pi[:8], eps[:8], s, dts, UNCOND, pm, sched, coeffs)
    pm_max = max(r["residual_norm"] for r in pm_res.rows)
    run.check("slope_in_1.7_2.3", 1.7 <= res.slope <= 2.3)
    run.check("point_mass_residual_le_1e-6", pm_max <= 1e-6)
    run.extra.update(slope=res.slope, point_mass_max_residual=pm_max,
                     c_skip_threshold=coeffs.skip_threshold(), c_skip_at_30=coeffs.c_skip(30))


def _opt_config(run, **over):
    from .optimizer import OptimizerConfig

    doc = dict(run.config.get("optimizer", {}))
    doc.setdefault("total_iters", int(run.opt("iters")))
    doc.setdefault("lr", float(run.opt("lr")))
    doc.setdefault("t_cut", int(run.opt("t_cut")))
    doc.setdefault("noise_removal", run.opt("noise_removal"))
    doc.setdefault("seed", run.seed)
    doc.update(over)
    return OptimizerConfig.from_dict(doc)


def cmd_cts_theorem2(run):
    from .consistency import ConsistencyCoeffs
    from .diffusion import build_schedule
    from .optimizer import theorem2_experiment

    gm = _oracle(run)
    cfg = _opt_config(run)
    seeds = [int(s) for s in run.rng("seeds").integers(0, 2**31 - 1, size=int(run.opt("seeds")))]
    res = theorem2_experiment(_ints(run.opt("gaps")), cfg, gm, build_schedule(), ConsistencyCoeffs(), seeds,
                              cond_y=_cond(run))
    run.write("theorem2.csv", res.to_csv())
    finest = res.rows[0]
    run.check("ratios_in_1.4_3.0", all(1.4 <= r <= 3.0 for r in res.ratios))
    run.check("finest_within_0.1_for_40_of_50", finest.within_tol >= 0.8 * finest.n_runs)
    run.extra.update(ratios=res.ratios, slope=res.slope, excluded=len(res.excluded))


def cmd_cts_optimize(run):
    from .consistency import ConsistencyCoeffs
    from .diffusion import build_schedule
    from .optimizer import optimize

    gm = _oracle(run)
    cfg = _opt_config(run)
    theta0 = run.opt("theta0")
    theta0 = np.array(_floats(theta0)) if theta0 is not None else run.rng("theta0").normal(scale=2.0, size=gm.dim)
    rep = optimize(theta0, cfg, _cond(run), gm, build_schedule(), ConsistencyCoeffs())
    run.write("run.csv", rep.to_csv())
    run.write("run.json", rep.to_json() + "\n")
    run.check("completed", rep.status == "completed")
    run.extra.update(final_mode_dist=rep.final_mode_dist)


# ------------------------------------------------------------ texture


def _target_image(run, res):
    path = run.opt("target")
    if path is not None:
        data = np.fromfile(run.input("target", path), dtype="<f4").astype(float)
        if data.size != res * res * 3:
            raise ParameterError(f"target must hold {res}x{res}x3 float32 values")
        return data.reshape(res * res, 3)
    pat = run.opt("pattern")
    if pat == "constant":
        return np.tile([0.2, 0.6, 0.9], (res * res, 1))
    if pat == "checker":
        i = np.arange(res)
        cb = ((i[:, None] // max(res // 4, 1) + i[None, :] // max(res // 4, 1)) % 2).astype(float).ravel()
        return np.repeat(cb[:, None], 3, axis=1) * 0.8 + 0.1
    raise ParameterError(f"unknown pattern {pat!r}")


def cmd_texture_fit(run):
    import io as _io

    from .texture import AnchorSet, DecoderParams, MultiResGrid, fit_to_target, image_samples, save_container

    res = int(run.opt("res"))
    target = _target_image(run, res)
    rng = run.rng("init")
    grid = MultiResGrid.create(levels=(8, 16), features=4, rng=rng, scale=0.1)
    params = DecoderParams.create(grid.width, heads=2, rng=rng)
    samples = image_samples(res)
    anchors = AnchorSet.stratified([(0, 0)], 16, run.rng("anchors"))
    fit = fit_to_target(grid, params, samples, anchors, target, int(run.opt("steps")), float(run.opt("lr")))
    run.write("loss.csv", "step,mse\n" + "".join(f"{i},{v:.12e}\n" for i, v in enumerate(fit.losses)))
    buf = _io.BytesIO()
    save_container(buf, grid, params)
    run.write("texture.bin", buf.getvalue())
    run.check("completed", fit.status == "completed")
    run.check("loss_decreased_10x", fit.losses[-1] * 10 <= fit.losses[0])
    run.extra.update(initial_mse=fit.losses[0], final_mse=fit.losses[-1])


def cmd_texture_gradcheck(run):
    from .texture import gradcheck, tiny_config

    grid, params, samples, anchors = tiny_config(run.seed)
    rep = gradcheck(grid, params, samples, anchors, rng=run.rng("weights"))
    run.write("gradcheck.json", json.dumps(rep, indent=2, sort_keys=True) + "\n")
    run.check("max_rel_err_le_1e-4", max(rep.values()) <= 1e-4)
    run.extra["max_rel_err"] = max(rep.values())


# ------------------------------------------------------------ physics


def cmd_physics_settle(run):
    from .physics import (apply_transforms, interpenetration_check, proxies_from_layout, settle, support_ok,
                          transforms_to_json)

    h = _layout(run)
    static = [s for s in str(run.opt("static") or "").split(",") if s]
    proxies = proxies_from_layout(h, static)
    room = h.rooms[0].bounds if len(h.rooms) == 1 else None
    tr = settle(proxies, room=room, tau=float(run.opt("tau")))
    run.write("transforms.json", transforms_to_json(tr))
    boxes = apply_transforms([p.box for p in proxies], tr)
    run.check("no_interpenetration", not interpenetration_check(boxes))
    run.check("supported", all(support_ok(b, boxes, float(run.opt("tau"))) for b in boxes if b.name not in static))
    run.check("no_height_increase", all(t.dt[2] <= 0 for t in tr))


# ---------------------------------------------------------- composite


def cmd_composite(run):
    from .geometry import DepthBuffers, composite, read_raw, write_raw

    w, h = run.opt("width"), run.opt("height")
    if w is None or h is None:
        raise ParameterError("--width and --height are required")
    cf, df = read_raw(run.input("furniture", run.opt("furniture")), int(w), int(h))
    cl, dl = read_raw(run.input("layout_buffer", run.opt("layout_buffer")), int(w), int(h))
    out = composite(DepthBuffers(cf, df, cl, dl))
    depth = np.minimum(df, dl)
    path = run.out / "composite.raw"
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".raw.tmp")
    write_raw(tmp, out, depth)
    os.replace(tmp, path)
    run.artifacts.append("composite.raw")
    run.check("matches_depth_test", np.array_equal(out, np.where((df <= dl)[..., None], cf, cl)))


# ------------------------------------------------------------- parser


COMMANDS = {
    ("layout", "validate"): cmd_layout_validate,
    ("layout", "refine"): cmd_layout_refine,
    ("layout", "orient"): cmd_layout_orient,
    ("layout", "export"): cmd_layout_export,
    ("camera", "zigzag"): cmd_camera_zigzag,
    ("cts", "theorem1"): cmd_cts_theorem1,
    ("cts", "theorem2"): cmd_cts_theorem2,
    ("cts", "optimize"): cmd_cts_optimize,
    ("texture", "fit"): cmd_texture_fit,
    ("texture", "gradcheck"): cmd_texture_gradcheck,
    ("physics", "settle"): cmd_physics_settle,
    ("composite",): cmd_composite,
}

HELP = {
    ("layout", "validate"): "check overlaps and room bounds; writes violations.json",
    ("layout", "refine"): "verify/refine loop; writes layout_refined.json, violations.json",
    ("layout", "orient"): "assign yaws by group; writes layout_oriented.json",
    ("layout", "export"): "planar room mesh; writes mesh.obj",
    ("camera", "zigzag"): "wall-following trajectory; writes trajectory.json",
    ("cts", "theorem1"): "local-error sweep; writes theorem1.csv (dt,residual_norm,term1,term2 + slope row)",
    ("cts", "theorem2"): "gap study; writes theorem2.csv (gap,error,n_converged,n_runs,within_tol + slope row)",
    ("cts", "optimize"): "one optimizer run; writes run.csv (iter,t,s,term1,term2,grad_norm,mode_dist), run.json",
    ("texture", "fit"): "fit the texture field to a target; writes loss.csv (step,mse), texture.bin",
    ("texture", "gradcheck"): "analytic vs finite-difference gradients; writes gradcheck.json",
    ("physics", "settle"): "gravity settling; writes transforms.json",
    ("composite",): "depth-composite two raw RGBA+depth buffers; writes composite.raw",
}


def _common():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--config", help="JSON or TOML file supplying defaults for any option")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory (default ./out)")
    g.add_argument("--refiner-url")
    g.add_argument("--refiner-token-env", help="environment variable holding the refiner bearer token")
    g.add_argument("--oracle", help="Gaussian-mixture oracle JSON")
    return p


def _add_options(key, p):
    if key[0] in ("layout", "physics"):
        p.add_argument("--layout", help="layout JSON document")
        p.add_argument("--eps-overlap", type=float)
    if key == ("layout", "refine"):
        p.add_argument("--max-iter", type=int)
    if key == ("camera", "zigzag"):
        p.add_argument("--bounds", help="x0,y0,x1,y1 in metres")
        p.add_argument("--n", type=int, help="number of waypoints")
        for name in ("margin", "h-min", "h-max", "d-min"):
            p.add_argument(f"--{name}", type=float)
    if key[0] == "cts":
        p.add_argument("--cond", help="comma-separated component indices (default: unconditional)")
    if key == ("cts", "theorem1"):
        p.add_argument("--sweep", help="comma-separated step gaps")
        p.add_argument("--s", type=int, help="start step")
        p.add_argument("--n-states", type=int)
    if key in (("cts", "theorem2"), ("cts", "optimize")):
        p.add_argument("--iters", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--noise-removal", choices=("iteration", "t500", "both"))
    if key == ("cts", "theorem2"):
        p.add_argument("--gaps")
        p.add_argument("--seeds", type=int, help="number of seeded starts per gap")
    if key == ("cts", "optimize"):
        p.add_argument("--t-cut", type=int)
        p.add_argument("--theta0", help="comma-separated start point")
    if key == ("texture", "fit"):
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--res", type=int)
        p.add_argument("--pattern", choices=("checker", "constant"))
        p.add_argument("--target", help="raw float32 res x res x 3 image")
    if key == ("physics", "settle"):
        p.add_argument("--tau", type=float)
        p.add_argument("--static", help="comma-separated names of boxes that stay put")
    if key == ("composite",):
        p.add_argument("--furniture", help="raw RGBA+depth float32 buffer")
        p.add_argument("--layout-buffer", help="raw RGBA+depth float32 buffer")
        p.add_argument("--width", type=int)
        p.add_argument("--height", type=int)


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="ctskit", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    top = parser.add_subparsers(dest="group", required=True)
    groups = {}
    for key in COMMANDS:
        if len(key) == 1:
            p = top.add_parser(key[0], parents=[common], help=HELP[key], description=HELP[key])
            p.set_defaults(key=key)
            _add_options(key, p)
            continue
        if key[0] not in groups:
            gp = top.add_parser(key[0], help=f"{key[0]} subcommands")
            groups[key[0]] = gp.add_subparsers(dest="action", required=True)
        p = groups[key[0]].add_parser(key[1], parents=[common], help=HELP[key], description=HELP[key])
        p.set_defaults(key=key)
        _add_options(key, p)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    key = args.key
    try:
        run = Run(args, " ".join(key))
        COMMANDS[key](run)
        return run.finish()
    except (CtsKitError, OSError, KeyError, ValueError) as exc:
        print(f"ctskit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
