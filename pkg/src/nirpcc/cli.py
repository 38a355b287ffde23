"""Command-line entry point: ``nirpcc encode|decode|eval|sweep``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
``NIRPCC_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from pathlib import Path

from nirpcc import bitstream as bs
from nirpcc import codec
from nirpcc.metrics import RD_COLUMNS, RDPoint, bpp, d1_psnr, scaling_ratio, y_psnr, LUMA_MATRICES
from nirpcc.pointset_io import PlyError, devoxelize, load_voxel_cloud, write_ply
from nirpcc.training import EmptyReconstruction, TrainingDiverged
from nirpcc.weight_codec import DecodeError, QuantizationOverflow

log = logging.getLogger("nirpcc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ERRORS = (PlyError, bs.ContainerError, DecodeError, QuantizationOverflow,
               EmptyReconstruction, TrainingDiverged, ValueError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text):
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pair(text):
    vals = _float_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected LAMBDA_F,LAMBDA_G, got {text!r}")
    return vals


def _add_encode_options(p):
    p.add_argument("--profile", choices=sorted(codec.PROFILES), default="toy")
    p.add_argument("-N", "--resolution-bits", type=int, help="grid resolution bits (toy 8, paper 10)")
    p.add_argument("-T", "--cube-bits", type=int, help="cube partition bits (default 5)")
    p.add_argument("--steps-geometry", type=int)
    p.add_argument("--steps-attribute", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--beta", type=float, help="occupied share of each geometry batch (default 0.5)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--geometry-only", action="store_true")
    p.add_argument("--num-frequencies", type=int)
    p.add_argument("--resblocks-geometry", type=int)
    p.add_argument("--resblocks-attribute", type=int)
    p.add_argument("--outer-width", type=int)
    p.add_argument("--inner-width", type=int)
    p.add_argument("--step-exp-geometry", type=int, help="quantization step 2**-e for the occupancy net")
    p.add_argument("--step-exp-attribute", type=int, help="quantization step 2**-e for the color net")
    p.add_argument("--tau-grid", type=_float_list, help="comma-separated thresholds to search")


def build_parser():
    parser = _Parser(prog="nirpcc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="compress a PLY point cloud")
    p.add_argument("input")
    p.add_argument("output")
    _add_encode_options(p)
    p.add_argument("--lambda-f", type=float, default=0.0)
    p.add_argument("--lambda-g", type=float, default=0.0)
    p.add_argument("--report", action="store_true", help="also render threshold and loss figures")

    p = sub.add_parser("decode", help="reconstruct a PLY point cloud from a .nirp stream")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--ascii", action="store_true")

    p = sub.add_parser("eval", help="D1/Y PSNR of a test cloud against a reference")
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("-N", "--resolution-bits", type=int, default=10)
    p.add_argument("--stream", help=".nirp file whose size gives the bpp column")
    p.add_argument("--luma", choices=sorted(LUMA_MATRICES), default="bt709")
    p.add_argument("--no-header", action="store_true")

    p = sub.add_parser("sweep", help="encode/decode/eval over several lambda pairs")
    p.add_argument("input")
    p.add_argument("--pair", type=_pair, action="append", required=True, metavar="LF,LG",
                   help="lambda_f,lambda_g; repeat for each rate point")
    _add_encode_options(p)
    p.add_argument("--output", help="CSV path (default: stdout)")
    p.add_argument("--figure", help="RD figure path (default: next to --output as .png)")
    p.add_argument("--no-figure", action="store_true")
    p.add_argument("--workdir", help="keep streams and decoded clouds here")
    p.add_argument("--luma", choices=sorted(LUMA_MATRICES), default="bt709")
    return parser


def _encode_options(args, lambda_f, lambda_g) -> codec.EncodeOptions:
    return codec.EncodeOptions(
        profile=args.profile,
        resolution_bits=args.resolution_bits,
        cube_bits=args.cube_bits,
        lambda_f=lambda_f,
        lambda_g=lambda_g,
        steps_geometry=args.steps_geometry,
        steps_attribute=args.steps_attribute,
        batch_size=args.batch_size,
        beta=args.beta,
        seed=args.seed,
        geometry_only=args.geometry_only,
        num_frequencies=args.num_frequencies,
        num_resblocks_geometry=args.resblocks_geometry,
        num_resblocks_attribute=args.resblocks_attribute,
        outer_width=args.outer_width,
        inner_width=args.inner_width,
        geometry_step_exponent=args.step_exp_geometry,
        attribute_step_exponent=args.step_exp_attribute,
        tau_grid=args.tau_grid,
    )


def _encode_file(input_path, output_path, opts, report=False):
    prof = opts.resolve()
    vox = load_voxel_cloud(input_path, prof.resolution_bits)
    result = codec.encode_voxels(vox, opts)
    Path(output_path).write_bytes(result.data)
    codec.write_trace(f"{output_path}.geometry.csv", result.geometry_trace)
    if result.attribute_trace:
        codec.write_trace(f"{output_path}.attribute.csv", result.attribute_trace)
    if report:
        from nirpcc import plotting

        plotting.plot_threshold_curve(result.threshold.curve, f"{output_path}.threshold.png",
                                      result.threshold.tau)
        plotting.plot_loss_trace({"geometry": result.geometry_trace, "attribute": result.attribute_trace},
                                 f"{output_path}.loss.png")
    return vox, result


def cmd_encode(args):
    opts = _encode_options(args, args.lambda_f, args.lambda_g)
    vox, result = _encode_file(args.input, args.output, opts, args.report)
    c = result.container
    print(f"points        {len(vox)}")
    print(f"bytes         {len(result.data)}")
    print(f"bpp           {bpp(result.bits, len(vox)):.6f}")
    print(f"tau           {c.tau:.6f}")
    print(f"d1_psnr       {result.threshold.d1_psnr:.4f}")
    print(f"scaling_ratio {result.threshold.scaling_ratio:.6f}")
    print(f"geometry      {len(c.geometry_payload)} bytes, final loss {result.geometry_trace[-1][1]:.6g}"
          if result.geometry_trace else f"geometry      {len(c.geometry_payload)} bytes")
    if c.has_attributes:
        tail = f", final loss {result.attribute_trace[-1][1]:.6g}" if result.attribute_trace else ""
        print(f"attribute     {len(c.attribute_payload)} bytes{tail}")
    return EXIT_OK


def cmd_decode(args):
    cloud = codec.decode_bytes(Path(args.input).read_bytes())
    if len(cloud) == 0:
        log.warning("decoded cloud is empty")
    write_ply(devoxelize(cloud), args.output, ascii=args.ascii)
    return EXIT_OK


def evaluate(reference, test, stream_bits=None, luma="bt709", **extra) -> RDPoint:
    """RD row for a decoded cloud; Y PSNR only when both clouds carry colors."""
    y = None
    if reference.has_colors and test.has_colors and len(test):
        y = y_psnr(reference, test, luma)
    return RDPoint(
        bpp=bpp(stream_bits, len(reference)) if stream_bits is not None else None,
        d1_psnr=d1_psnr(reference, test),
        y_psnr=y,
        scaling_ratio=scaling_ratio(test, reference),
        **extra,
    )


def cmd_eval(args):
    ref = load_voxel_cloud(args.reference, args.resolution_bits)
    test = load_voxel_cloud(args.test, args.resolution_bits)
    bits = 8 * os.path.getsize(args.stream) if args.stream else None
    tau = bs.parse(Path(args.stream).read_bytes()).tau if args.stream else None
    point = evaluate(ref, test, bits, args.luma, tau=tau)
    if not args.no_header:
        print(",".join(RD_COLUMNS))
    print(point.csv_row())
    return EXIT_OK


def cmd_sweep(args):
    workdir = args.workdir or tempfile.mkdtemp(prefix="nirpcc-sweep-")
    os.makedirs(workdir, exist_ok=True)
    points, failures = [], 0
    for i, (lf, lg) in enumerate(args.pair):
        stem = os.path.join(workdir, f"point{i:02d}_lf{lf:g}_lg{lg:g}")
        try:
            opts = _encode_options(args, lf, lg)
            vox, result = _encode_file(args.input, stem + ".nirp", opts)
            decoded = codec.decode_bytes(Path(stem + ".nirp").read_bytes())
            write_ply(devoxelize(decoded), stem + ".ply")
            bits = 8 * os.path.getsize(stem + ".nirp")
            points.append(evaluate(vox, decoded, bits, args.luma, tau=result.container.tau,
                                   lambda_f=lf, lambda_g=lg))
        except DATA_ERRORS as exc:
            failures += 1
            print(f"sweep point lambda_f={lf:g} lambda_g={lg:g} failed: {exc}", file=sys.stderr)
    points.sort(key=lambda p: p.bpp)
    lines = [",".join(RD_COLUMNS)] + [p.csv_row() for p in points]
    if args.output:
        Path(args.output).write_text("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    figure = args.figure or (str(Path(args.output).with_suffix(".png")) if args.output else None)
    if figure and points and not args.no_figure:
        from nirpcc import plotting

        plotting.plot_rd(points, figure, title=Path(args.input).name)
    if not points:
        return EXIT_DATA
    return EXIT_OK


COMMANDS = {"encode": cmd_encode, "decode": cmd_decode, "eval": cmd_eval, "sweep": cmd_sweep}


def _limit_threads():
    n = os.environ.get("NIRPCC_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads()
        return COMMANDS[args.command](args)
    except DATA_ERRORS as exc:
        print(f"nirpcc {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"nirpcc {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
