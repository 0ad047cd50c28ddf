"""``octcodec`` command-line front end.

Every subcommand accepts ``--config FILE`` holding ``key = value`` lines whose
keys are the long option names of that subcommand. Flags given on the command
line override the file. Exit codes: 0 success, 1 usage, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
import time

import numpy as np

from . import synth
from .codec import (
    REPORT_FIELDS,
    Bitstream,
    CodecMode,
    decode,
    encode,
    eval_report,
)
from .config import ConfigError, load_config
from .context import SegmentSpec
from .errors import (
    CodecError,
    ConfigMismatchError,
    CorruptionError,
    DataError,
    ModelCorruptionError,
    TrainingError,
)
from .model import ModelConfig, init_model, load_model, save_model
from .octree import build_octree
from .pointcloud import append_csv, compute_bbox, load_ply, quantize, write_ply
from .train import AdamState, adam_update, batch_loss_and_grads, evaluate, make_batches, octree_examples
from .train import pretrain_loss_and_grads, random_mask

log = logging.getLogger("octcodec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

LOSS_FIELDS = ["phase", "epoch", "step", "loss", "seconds"]
BENCH_FIELDS = ["n", "g", "m", "mode", "depth", "epochs", "files", "bpp", "level_invocations",
                "group_invocations", "group_calls", "enc_time", "dec_time", "lossless", "model_checksum"]
MODE_NAMES = {"multi-group": CodecMode.MULTI_GROUP, "layer-wise": CodecMode.LAYER_WISE,
              "fully-autoregressive": CodecMode.FULLY_AUTOREGRESSIVE}


class UsageError(Exception):
    pass


class InvariantError(Exception):
    """A result the codec guarantees did not hold (e.g. a lossy roundtrip)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ parsers


def _int_list(text):
    try:
        values = [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _coding_args(p, m_default=None):
    p.add_argument("--depth", type=int, default=8, help="octree depth (default 8)")
    p.add_argument("--n", type=int, default=2048, help="context segment length (default 2048)")
    p.add_argument("--g", type=int, default=8, help="groups per segment (default 8)")
    p.add_argument("--m", type=int, default=m_default,
                   help="context depth, node plus ancestors (default: %s)"
                   % (m_default if m_default is not None else "taken from the model"))
    p.add_argument("--mode", choices=sorted(MODE_NAMES), default="multi-group",
                   help="coding schedule (default multi-group)")


def _model_args(p):
    p.add_argument("--d-model", type=int, default=64, help="embedding width (default 64)")
    p.add_argument("--heads", type=int, default=4, help="attention heads (default 4)")
    p.add_argument("--layers", type=int, default=2, help="attention blocks per branch (default 2)")
    p.add_argument("--ffn-mult", type=int, default=4, help="feed-forward expansion (default 4)")


def _train_args(p, pretrain):
    p.add_argument("--corpus", help="directory of .ply training clouds (required)")
    p.add_argument("--model", default="pretrained.octm" if pretrain else "model.octm",
                   help="output model file, rewritten after every epoch (default %(default)s)")
    p.add_argument("--init", help="start from this model file instead of a fresh initialisation")
    p.add_argument("--resume", action="store_true",
                   help="continue from --model and its optimizer sidecar")
    p.add_argument("--epochs", type=int, default=20, help="total epochs (default 20)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    p.add_argument("--seed", type=int, default=0, help="initialisation and shuffling seed (default 0)")
    p.add_argument("--batch-rows", type=int, default=4096,
                   help="padded rows per batch (default 4096)")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many optimizer steps")
    p.add_argument("--log", default=None, help="per-epoch loss CSV (default: <model>.loss.csv)")
    if pretrain:
        p.add_argument("--mask-prob", type=float, default=0.5,
                       help="probability of hiding a node's occupancy (default 0.5)")
    _coding_args(p, m_default=4)
    _model_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="octcodec", description="Learned octree occupancy codec for point cloud geometry.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file; command-line flags override it")
        return p

    p = add("synth", "Write a deterministic synthetic corpus of PLY files.")
    p.add_argument("--kind", choices=synth.KINDS, default="sphere-surface", help="shape family")
    p.add_argument("--count", type=int, default=10, help="number of clouds (default 10)")
    p.add_argument("--points", type=int, default=1000, help="points per cloud (default 1000)")
    p.add_argument("--seed", type=int, default=0, help="seed of the first cloud (default 0)")
    p.add_argument("--out-dir", default="corpus", help="output directory (default corpus)")

    _train_args(add("train", "Teacher-forced multi-group training."), pretrain=False)
    _train_args(add("pretrain", "Random-masking pretraining."), pretrain=True)

    p = add("encode", "Compress one PLY file into a .ecmo bitstream.")
    p.add_argument("--input", help="input PLY (required)")
    p.add_argument("--output", help="output bitstream (default: input with .ecmo)")
    p.add_argument("--model", default="model.octm", help="model file (default model.octm)")
    p.add_argument("--debug-tables", help="also write every per-node frequency table to this .npz")
    _coding_args(p)

    p = add("decode", "Decompress a .ecmo bitstream into a PLY file.")
    p.add_argument("--input", help="input bitstream (required)")
    p.add_argument("--output", help="output PLY (default: input with .ply)")
    p.add_argument("--model", default="model.octm", help="model file (default model.octm)")
    p.add_argument("--debug-tables", help="also write every per-node frequency table to this .npz")

    p = add("eval", "Encode, decode and measure one PLY file or a directory of them.")
    p.add_argument("--input", help="PLY file or directory (required)")
    p.add_argument("--model", default="model.octm", help="model file (default model.octm)")
    p.add_argument("--report", default="report.csv", help="CSV to append rows to (default report.csv)")
    p.add_argument("--peak", type=float, default=None, help="PSNR peak (default: bounding-box edge)")
    _coding_args(p)

    p = add("bench", "Sweep segment length and group count; one CSV row per cell.")
    p.add_argument("--corpus", help="training corpus directory (required unless --model is given)")
    p.add_argument("--eval-corpus", help="held-out corpus directory (required)")
    p.add_argument("--n-list", type=_int_list, default=None, help="segment lengths, e.g. 64,128 (default: --n)")
    p.add_argument("--g-list", type=_int_list, default=None, help="group counts, e.g. 1,2,4,8 (default: --g)")
    p.add_argument("--model", default=None, help="use this model in every cell instead of retraining")
    p.add_argument("--epochs", type=int, default=20, help="training epochs per cell (default 20)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    p.add_argument("--seed", type=int, default=0, help="seed for every cell (default 0)")
    p.add_argument("--batch-rows", type=int, default=4096, help="padded rows per batch (default 4096)")
    p.add_argument("--report", default="bench.csv", help="CSV to append rows to (default bench.csv)")
    _coding_args(p, m_default=4)
    _model_args(p)
    return parser


# ------------------------------------------------------------------- config


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def config_argv(sub: argparse.ArgumentParser, path) -> list:
    """Turn a config file into flag tokens for ``sub``; unknown keys raise."""
    try:
        entries = load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    by_dest = {a.dest: a for a in sub._actions if a.option_strings and a.dest not in ("help", "config")}
    argv = []
    for key, value in entries.items():
        action = by_dest.get(key)
        if action is None:
            raise UsageError(f"{path}: unknown key {key!r} for '{sub.prog}'")
        flag = next(s for s in action.option_strings if s.startswith("--"))
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(flag)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"{path}: {key} expects true or false, got {value!r}")
        else:
            argv += [flag, value]
    return argv


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        pos = argv.index(args.command)
        # config tokens go first so later command-line flags win
        argv = argv[:pos + 1] + config_argv(sub, args.config) + argv[pos + 1:]
        args = parser.parse_args(argv)
    return args


# ------------------------------------------------------------------ helpers


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, ""):
            raise UsageError(f"{args.command}: --{name.replace('_', '-')} is required")


def corpus_files(path) -> list:
    if os.path.isfile(path):
        return [path]
    if not os.path.isdir(path):
        raise DataError(f"{path}: no such file or directory")
    files = sorted(glob.glob(os.path.join(path, "*.ply")))
    if not files:
        raise DataError(f"{path}: no .ply files")
    return files


def corpus_examples(files, depth, spec):
    examples = []
    for f in files:
        pc = load_ply(f)
        examples += octree_examples(build_octree(quantize(pc, compute_bbox(pc), depth)), spec)
    return examples


def model_config(args) -> ModelConfig:
    try:
        return ModelConfig(d_model=args.d_model, heads=args.heads, layers_per_branch=args.layers,
                           ffn_mult=args.ffn_mult, context_depth=args.m, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def segment_spec(args, model=None) -> SegmentSpec:
    m = args.m if args.m is not None else model.cfg.context_depth
    try:
        return SegmentSpec(args.n, args.g, m)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def state_path(model_path) -> str:
    return model_path + ".opt.npz"


def save_state(path, opt: AdamState, epoch: int, checksum: bytes):
    arrays = {"step": np.array(opt.step), "epoch": np.array(epoch),
              "checksum": np.frombuffer(checksum, dtype=np.uint8)}
    for k, v in opt.m.items():
        arrays["m/" + k] = v
        arrays["v/" + k] = opt.v[k]
    tmp = path + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_state(path, checksum: bytes):
    try:
        z = np.load(path)
    except OSError as exc:
        raise DataError(f"cannot resume: {exc}") from None
    with z:
        if bytes(z["checksum"]) != checksum:
            raise DataError(f"{path} does not belong to the checkpointed model")
        opt = AdamState(step=int(z["step"]))
        for key in z.files:
            if key.startswith("m/"):
                opt.m[key[2:]] = z[key].copy()
                opt.v[key[2:]] = z["v/" + key[2:]].copy()
        return opt, int(z["epoch"])


def _save_model_atomic(model, path):
    tmp = path + ".tmp"
    save_model(model, tmp)
    os.replace(tmp, path)


def run_training(model, batches, args, pretrain, opt=None, start_epoch=0, on_epoch=None):
    """Epoch loop with a per-epoch shuffle seeded by ``(seed, epoch)`` so that a
    resumed run follows the same batch order as an uninterrupted one."""
    opt = opt if opt is not None else AdamState()
    history = []
    for epoch in range(start_epoch, args.epochs):
        rng = np.random.default_rng([args.seed, epoch])
        t0 = time.perf_counter()
        losses = []
        for bi in rng.permutation(len(batches)):
            if args.max_steps is not None and opt.step >= args.max_steps:
                break
            b = batches[bi]
            if pretrain:
                value, grads = pretrain_loss_and_grads(b, model, random_mask(b, args.mask_prob, rng))
            else:
                value, grads = batch_loss_and_grads(b, model)
            adam_update(model, grads, opt, args.lr)
            losses.append(value)
        if not losses:
            break
        history.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, history[-1], opt, time.perf_counter() - t0)
    return opt, history


# ----------------------------------------------------------------- commands


def cmd_synth(args):
    paths = synth.write_corpus(args.kind, args.count, args.points, args.seed, args.out_dir)
    log.info("wrote %d clouds to %s", len(paths), args.out_dir)
    return EXIT_OK


def _cmd_fit(args, pretrain):
    _require(args, "corpus")
    phase = "pretrain" if pretrain else "train"
    spec = segment_spec(args)
    batches = make_batches(corpus_examples(corpus_files(args.corpus), args.depth, spec), args.batch_rows)
    cfg = model_config(args)
    opt, start = None, 0
    if args.resume:
        model = load_model(args.model)
        opt, start = load_state(state_path(args.model), model.checksum)
        log.info("resuming %s at epoch %d, step %d", args.model, start, opt.step)
    elif args.init:
        model = load_model(args.init)
    else:
        model = init_model(cfg)
    if model.cfg.context_depth != spec.m:
        raise ConfigMismatchError(f"model context depth {model.cfg.context_depth} differs from --m {spec.m}")
    log_path = args.log or args.model + ".loss.csv"

    def on_epoch(epoch, loss, opt, seconds):
        _save_model_atomic(model, args.model)
        save_state(state_path(args.model), opt, epoch + 1, model.checksum)
        append_csv(log_path, {"phase": phase, "epoch": epoch + 1, "step": opt.step, "loss": loss,
                              "seconds": seconds}, LOSS_FIELDS)
        log.info("%s epoch %d step %d loss %.4f (%.1fs)", phase, epoch + 1, opt.step, loss, seconds)

    run_training(model, batches, args, pretrain, opt, start, on_epoch)
    if not os.path.exists(args.model):
        _save_model_atomic(model, args.model)
    return EXIT_OK


def cmd_train(args):
    return _cmd_fit(args, pretrain=False)


def cmd_pretrain(args):
    return _cmd_fit(args, pretrain=True)


def _save_tables(path, tables):
    np.savez(path, freq=np.stack([t.freq for t in tables]) if tables else np.zeros((0, 255), np.int64))


def _stem(path, ext):
    return os.path.splitext(path)[0] + ext


def cmd_encode(args):
    _require(args, "input")
    model = load_model(args.model)
    res = encode(load_ply(args.input), args.depth, segment_spec(args, model), MODE_NAMES[args.mode],
                 model, debug=bool(args.debug_tables))
    out = args.output or _stem(args.input, ".ecmo")
    with open(out, "wb") as f:
        f.write(res.bitstream.to_bytes())
    if args.debug_tables:
        _save_tables(args.debug_tables, res.tables)
    log.info("%s: %d bits, %.4f bpp", out, res.bitstream.payload_bits, res.bpp)
    return EXIT_OK


def cmd_decode(args):
    _require(args, "input")
    model = load_model(args.model)
    try:
        with open(args.input, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise DataError(str(exc)) from None
    res = decode(data, model, debug=bool(args.debug_tables))
    out = args.output or _stem(args.input, ".ply")
    write_ply(out, res.cloud)
    if args.debug_tables:
        _save_tables(args.debug_tables, res.tables)
    log.info("%s: %d points in %.2fs", out, len(res.cloud), res.stats.wall_time)
    return EXIT_OK


def _roundtrip(pc, depth, spec, mode, model):
    enc = encode(pc, depth, spec, mode, model)
    dec = decode(Bitstream.from_bytes(enc.bitstream.to_bytes()), model)
    return enc, dec


def cmd_eval(args):
    _require(args, "input")
    model = load_model(args.model)
    spec = segment_spec(args, model)
    lossy = []
    for f in corpus_files(args.input):
        pc = load_ply(f)
        enc, dec = _roundtrip(pc, args.depth, spec, MODE_NAMES[args.mode], model)
        row = eval_report(pc, enc, dec, file=f, peak=args.peak)
        append_csv(args.report, row, REPORT_FIELDS)
        log.info("%s: %.4f bpp, lossless %s", f, row["bpp"], row["lossless"])
        if not row["lossless"]:
            lossy.append(f)
    if lossy:
        raise InvariantError(f"octree-domain roundtrip differs for {', '.join(lossy)}")
    return EXIT_OK


def cmd_bench(args):
    _require(args, "eval_corpus")
    if args.model is None:
        _require(args, "corpus")
    mode = MODE_NAMES[args.mode]
    n_list = args.n_list or [args.n]
    g_list = args.g_list or [args.g]
    eval_clouds = [load_ply(f) for f in corpus_files(args.eval_corpus)]
    fixed = load_model(args.model) if args.model else None
    train_files = corpus_files(args.corpus) if fixed is None else []
    for n in n_list:
        for g in g_list:
            spec = SegmentSpec(n, g, args.m if fixed is None else fixed.cfg.context_depth)
            if fixed is None:
                model = init_model(model_config(args))
                batches = make_batches(corpus_examples(train_files, args.depth, spec), args.batch_rows)
                args.max_steps = None
                run_training(model, batches, args, pretrain=False)
            else:
                model = fixed
            row = {"n": n, "g": g, "m": spec.m, "mode": args.mode, "depth": args.depth,
                   "epochs": 0 if fixed else args.epochs, "files": len(eval_clouds),
                   "model_checksum": model.checksum.hex()[:16]}
            bits = points = lvl = grp = calls = 0
            enc_t = dec_t = 0.0
            lossless = True
            for pc in eval_clouds:
                enc, dec = _roundtrip(pc, args.depth, spec, mode, model)
                bits += enc.bitstream.payload_bits
                points += len(pc)
                lvl += dec.stats.level_branch_invocations
                grp += dec.stats.group_branch_invocations
                calls += dec.stats.group_branch_calls
                enc_t += enc.enc_time
                dec_t += dec.stats.wall_time
                lossless &= dec.voxels == enc.voxels
            row.update(bpp=bits / points, level_invocations=lvl, group_invocations=grp, group_calls=calls,
                       enc_time=enc_t, dec_time=dec_t, lossless=lossless)
            append_csv(args.report, row, BENCH_FIELDS)
            log.info("n=%d g=%d: %.4f bpp", n, g, row["bpp"])
            if not lossless:
                raise InvariantError(f"lossy roundtrip in bench cell n={n} g={g}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "pretrain": cmd_pretrain, "encode": cmd_encode,
            "decode": cmd_decode, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorruptionError, ModelCorruptionError, ConfigMismatchError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantError, TrainingError, CodecError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entry_point():
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
