"""Command-line entry point: ``pointup <command> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .cloud import as_cloud, extract_patches, normalize_unit_sphere
from .errors import DegenerateGeometryError, DivergedError, InvalidArgumentError, InvalidInputError, ParseError
from .gradcheck import joint_suite, neu_suite, renderer_suite
from .io import read_off, read_xyz, write_pgm, write_png, write_xyz
from .losses import joint_loss
from .metrics import evaluate
from .neu import init_params, load_params, save_params, upsampler_forward
from .optimize import train_neu, upsample_direct
from .render import THREADS_ENV, render_views

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("pointup")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_run_options(p, neu=False):
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="key = value settings file (flags override it)")
    p.add_argument("--rate", type=int, default=S, help="upsampling rate r (default 4)")
    p.add_argument("--seed", type=int, default=S, help="random seed (default 0)")
    p.add_argument("--lr", type=float, default=S, help="Adam learning rate (default 0.001)")
    p.add_argument("--weights", default=S, help="loss weights sc,ic,hd,un (default 100,30,10,25)")
    p.add_argument("--views", type=int, default=S, help="number of virtual cameras (default 8)")
    p.add_argument("--img-size", dest="img_size", type=int, default=S, help="rendered image side (default 64)")
    p.add_argument("--gamma", type=float, default=S, help="rasterizer sharpness (default 1e-4)")
    p.add_argument("--width", type=int, default=S, help="upsampler feature width (default 32)")
    p.add_argument("--trace", default=S, help="write the per-step loss trace as CSV")
    p.add_argument("--timing", action="store_true", help="record wall time in the trace (not byte-stable)")
    p.add_argument("--plot", default=S, help="directory for PNG figures of the run")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any other setting, e.g. --set radius=3 (repeatable)")


def build_parser():
    parser = _Parser(prog="pointup", description="Self-supervised point cloud upsampling.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    p = sub.add_parser("upsample", help="upsample one cloud by direct optimization or a trained upsampler")
    p.add_argument("--input", required=True, help="sparse cloud (.xyz)")
    p.add_argument("--out", required=True, help="dense cloud output (.xyz)")
    p.add_argument("--mode", choices=("direct", "neu"), default=S)
    p.add_argument("--iters", type=int, default=S, help="direct mode: Adam iterations (default 200)")
    p.add_argument("--params", default=S, help="neu mode: trained parameters (.neup); trains on the input if absent")
    p.add_argument("--epochs", type=int, default=S, help="neu mode without --params: training epochs")
    _add_run_options(p)

    p = sub.add_parser("render", help="render silhouette views to PGM files")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output directory for view_00.pgm, ...")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--gamma", type=float, default=1e-4)
    p.add_argument("--format", choices=("p2", "p5"), default="p5")
    p.add_argument("--png", action="store_true", help="also write view_00.png, ...")
    p.add_argument("--plot", default=None, help="write a grid figure of all views to this PNG path")

    p = sub.add_parser("evaluate", help="Chamfer, Hausdorff and optional point-to-surface metrics (x1e3)")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--ref-mesh", dest="ref_mesh", default=None, help="reference mesh (.off) for P2F")
    p.add_argument("--csv", action="store_true", help="print a CSV header and row instead")

    p = sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="fewer random instances")
    p.add_argument("--strict", action="store_true",
                   help="plain two-point differences at h=1e-4 for every suite (see README)")

    p = sub.add_parser("train", help="train the upsampler on a directory of patches")
    p.add_argument("--patch-dir", dest="patch_dir", required=True, help="directory of .xyz patches")
    p.add_argument("--out", required=True, help="parameter file (.neup)")
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch", type=int, default=S)
    _add_run_options(p)
    return parser


def _run_config(ns):
    flags = {k: v for k, v in vars(ns).items() if k in cfgmod.KEYS}
    for item in ns.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidArgumentError(f"--set expects KEY=VALUE, got {item!r}")
        key = key.strip().replace("-", "_")
        if key in flags:
            continue  # a dedicated flag wins over --set
        flags[key] = value.strip()
    return cfgmod.resolve(flags, getattr(ns, "config", None))


def _write_trace(trace, run, timing):
    if run.trace:
        trace.write_csv(run.trace, timing=timing)


def _plots(run, trace, sparse=None, dense=None, images=None, title="loss"):
    if not run.plot:
        return
    from .plotting import plot_clouds, plot_trace, plot_views

    out = Path(run.plot)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if trace is not None and len(trace):
        plot_trace(trace, out / "loss.png", run.weights, title)
        written.append(out / "loss.png")
    if images is not None:
        plot_views(images, out / "views.png")
        written.append(out / "views.png")
    if sparse is not None and dense is not None:
        plot_clouds(sparse, dense, out / "clouds.png")
        written.append(out / "clouds.png")
    for path in written:
        print(f"figure={path}")


def cmd_upsample(ns):
    run = _run_config(ns)
    cloud = read_xyz(ns.input)
    normed, centroid, scale = normalize_unit_sphere(cloud)
    rig = run.rig()
    opt = run.optim_config()
    trace = None
    if run.mode == "direct":
        dense, trace = upsample_direct(normed, run.rate, rig, opt,
                                       callback=lambda i, r: log.info("iter %d joint %.6g", i, r.joint))
    else:
        if run.params:
            params = load_params(run.params)
            if params.rate != run.rate:
                raise InvalidArgumentError(f"parameters were trained for rate {params.rate}, not {run.rate}")
        else:
            size = min(run.patch_size, len(normed))
            patches = extract_patches(normed, min(run.patch_count, len(normed)), size)
            params, trace = train_neu(patches, run.rate, rig, opt, init_params(run.seed, run.width, run.rate),
                                      callback=lambda e, r: log.info("epoch %d joint %.6g", e, r.joint))
        dense = upsampler_forward(normed, run.rate, params)
        if not np.all(np.isfinite(dense)):
            raise DivergedError("upsampler produced non-finite coordinates", trace)
    report = joint_loss(normed, dense, rig, run.weights, run.render_params(), uniform_p=run.uniform_p)
    write_xyz(dense * scale + centroid, ns.out)
    if trace is not None:
        _write_trace(trace, run, ns.timing)
    print(f"points={len(dense)}")
    print(report.to_text())
    if run.plot:
        images = render_views(dense, rig, run.render_params())
        _plots(run, trace, normed, dense, images, f"{run.mode} x{run.rate}")
    return EXIT_OK


def cmd_render(ns):
    cloud = read_xyz(ns.input)
    normed = normalize_unit_sphere(cloud)[0]
    run = cfgmod.resolve({"views": ns.views, "img_size": ns.size, "gamma": ns.gamma})
    images = render_views(normed, run.rig(), run.render_params())
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for j, img in enumerate(images):
        write_pgm(img, out / f"view_{j:02d}.pgm", binary=ns.format == "p5")
        if ns.png:
            write_png(img, out / f"view_{j:02d}.png")
        print(f"view_{j:02d} mean={img.mean():.6f} path={out / f'view_{j:02d}.pgm'}")
    if ns.plot:
        from .plotting import plot_views

        plot_views(images, ns.plot)
        print(f"figure={ns.plot}")
    return EXIT_OK


def cmd_evaluate(ns):
    mesh = read_off(ns.ref_mesh) if ns.ref_mesh else None
    report = evaluate(read_xyz(ns.pred), read_xyz(ns.ref), mesh)
    if ns.csv:
        print(report.csv_header())
        print(report.csv_row())
    else:
        print(report.to_text())
    return EXIT_OK


def cmd_gradcheck(ns):
    if ns.strict:
        steps = {"renderer": (1e-4, 2), "joint": (1e-4, 2), "neu": (1e-4, 2)}
    else:
        # steps at which the differences have converged (see README)
        steps = {"renderer": (1e-5, 4), "joint": (1e-4, 4), "neu": (1e-4, 2)}
    results = [
        renderer_suite(ns.seed, configs=10 if ns.quick else 50, step=steps["renderer"][0],
                       stencil=steps["renderer"][1]),
        joint_suite(ns.seed, instances=3 if ns.quick else 20, step=steps["joint"][0],
                    stencil=steps["joint"][1]),
        neu_suite(ns.seed, step=steps["neu"][0], stencil=steps["neu"][1]),
    ]
    for res in results:
        print(res.summary())
    failed = [res for res in results if not res.passed]
    if failed:
        for res in failed:
            print(f"worst coordinate: {res.name} {res.worst.where}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_train(ns):
    run = _run_config(ns)
    folder = Path(ns.patch_dir)
    if not folder.is_dir():
        raise InvalidInputError(f"{folder}: not a directory")
    files = sorted(folder.glob("*.xyz"))
    if not files:
        raise InvalidInputError(f"{folder}: no .xyz patches found")
    patches = [normalize_unit_sphere(read_xyz(f))[0] for f in files]
    params, trace = train_neu(patches, run.rate, run.rig(), run.optim_config(),
                              init_params(run.seed, run.width, run.rate),
                              callback=lambda e, r: log.info("epoch %d joint %.6g", e, r.joint))
    save_params(params, ns.out)
    _write_trace(trace, run, ns.timing)
    print(f"patches={len(patches)}")
    print(f"epochs={len(trace)}")
    if len(trace):
        print(trace.reports[-1].to_text())
    _plots(run, trace, title=f"training x{run.rate}")
    return EXIT_OK


COMMANDS = {
    "upsample": cmd_upsample,
    "render": cmd_render,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
}


def run_command(argv):
    """Run one command; returns the exit status instead of exiting."""
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    level = logging.WARNING - 10 * min(ns.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    log.debug("threads from %s", THREADS_ENV)
    try:
        return COMMANDS[ns.command](ns)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, InvalidInputError, DegenerateGeometryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None):
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
