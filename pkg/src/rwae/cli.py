"""Command-line entry points: ``gen-data``, ``train``, ``eval``, ``swap``, ``sample``.

Every command first prints its fully resolved run configuration to stdout (in
the same INI format accepted by ``--config``); progress goes to stderr.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file-format
error, 4 numeric failure. ``RWAE_SEED`` supplies the seed when neither a flag
nor the config file sets one.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as rc_mod
from .config import RunConfig, dump_run_config, parse_run_config
from .data import GeneratorConfig, generate_dataset, load_dataset, save_dataset
from .errors import ConfigurationError, FormatError, InvalidArgumentError, NumericError
from .metrics import (
    config_hash,
    evaluate,
    reconstruct,
    swap_generate,
    train_frame_classifier,
    write_report,
)
from .training import PRESETS, Trainer, load_checkpoint, save_checkpoint

log = logging.getLogger("rwae")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# Categorical-KL weight used when weak supervision is switched on but the
# resolved config has beta3 = 0 (value of the presets that use it).
WEAK_BETA3 = 50.0


class UsageError(InvalidArgumentError):
    pass


# images -----------------------------------------------------------------------------------


def write_pnm(path, image: np.ndarray) -> None:
    """Write an (H, W) or (H, W, 3) array in [0, 1] as binary PGM or PPM."""
    img = np.asarray(image, dtype=np.float64)
    if not np.isfinite(img).all():
        raise NumericError(f"non-finite pixels in {path}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.ndim == 2:
        magic = b"P5"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    else:
        raise InvalidArgumentError(f"cannot write image of shape {img.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pnm(path) -> np.ndarray:
    """Inverse of ``write_pnm`` for files it wrote; returns uint8 pixels."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5", b"P6") or parts[2] != b"255":
        raise FormatError(f"{path}: not a binary PGM/PPM written by rwae")
    w, h = (int(v) for v in parts[1].split())
    ch = 1 if parts[0] == b"P5" else 3
    body = parts[3]
    if len(body) != w * h * ch:
        raise FormatError(f"{path}: expected {w * h * ch} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


def _frame_image(frame: np.ndarray) -> np.ndarray:
    # (C, H, W) -> (H, W) or (H, W, 3)
    if frame.shape[0] == 1:
        return frame[0]
    if frame.shape[0] == 3:
        return np.transpose(frame, (1, 2, 0))
    raise InvalidArgumentError(f"frames need 1 or 3 channels, got {frame.shape[0]}")


def tile_rows(rows: list[np.ndarray]) -> np.ndarray:
    """Stack sequences (T, C, H, W) into one image, one sequence per row."""
    return np.concatenate([np.concatenate([_frame_image(f) for f in seq], axis=1) for seq in rows], axis=0)


# config resolution -------------------------------------------------------------------------


def _csv(kind):
    def parse(text: str):
        try:
            return tuple(kind(p.strip()) for p in text.split(",") if p.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


def _explicit_keys(text: str) -> set[tuple[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    parser.read_string(text)
    return {(s, k) for s in parser.sections() for k, _ in parser.items(s)}


def _resolve(args, train_flags: dict | None = None, gen_flags: dict | None = None, paths: dict | None = None):
    """Config file, then preset / flags, then the seed fallback chain."""
    text = ""
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {args.config}: {exc}") from exc
    rc = parse_run_config(text, source=getattr(args, "config", None) or "defaults")
    explicit = _explicit_keys(text) if text else set()

    preset = getattr(args, "preset", None)
    desk = getattr(args, "desk", None)
    if preset is not None or desk is not None:
        # Re-expand the preset underneath the file's explicit [train] values.
        rc.preset = preset if preset is not None else rc.preset
        rc.desk = desk if desk is not None else rc.desk
        file_train = {k: getattr(rc.train, k) for (s, k) in explicit if s == "train"}
        rc.train = rc_mod.apply_overrides(rc_mod.base_train_config(rc.preset, rc.desk), file_train, "config file")

    seed_flag = getattr(args, "seed", None)
    env_seed = os.environ.get("RWAE_SEED")
    for section, obj_name in (("generator", "generator"), ("train", "train")):
        if seed_flag is None and (section, "seed") not in explicit and env_seed is not None:
            try:
                seed = int(env_seed)
            except ValueError:
                raise UsageError(f"RWAE_SEED must be an integer, got {env_seed!r}") from None
            setattr(rc, obj_name, dataclasses.replace(getattr(rc, obj_name), seed=seed))

    if gen_flags:
        rc.generator = rc_mod.apply_overrides(rc.generator, gen_flags, "command line")
    if train_flags:
        rc.train = rc_mod.apply_overrides(rc.train, train_flags, "command line")
    for k, v in (paths or {}).items():
        if v is not None:
            rc.paths[k] = str(v)
    return rc


def _announce(rc: RunConfig) -> str:
    text = dump_run_config(rc)
    sys.stdout.write(text)
    sys.stdout.flush()
    return text


def _need_path(rc: RunConfig, key: str, flag: str) -> Path:
    value = rc.paths.get(key, "")
    if not value:
        raise UsageError(f"{flag} is required (or set {key} in [paths])")
    return Path(value)


def _torch_seed(seed: int):
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


# commands ---------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    flags = {
        "image_size": args.size,
        "frames": args.frames,
        "n_sequences": args.count,
        "shapes": args.shapes,
        "motions": args.motions,
        "sizes": args.shape_sizes,
        "speed_range": args.speed,
        "seed": args.seed,
    }
    rc = _resolve(args, gen_flags={k: v for k, v in flags.items() if v is not None}, paths={"dataset": args.out})
    if rc.generator.speed_range is not None and len(rc.generator.speed_range) != 2:
        raise UsageError("--speed takes exactly two values: min,max")
    try:
        rc.generator.validate()
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from None
    out = _need_path(rc, "dataset", "--out")
    _announce(rc)

    ds = generate_dataset(rc.generator)
    save_dataset(ds, out)
    digest = hashlib.sha256(out.read_bytes()).hexdigest()
    lines = [f"file\t{out.name}", f"sha256\t{digest}", f"sequences\t{len(ds)}"]
    for kind, counts in ds.label_counts().items():
        for name, n in counts.items():
            lines.append(f"{kind}\t{name}\t{n}")
    summary = summary_path(out)
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("wrote %d sequences to %s (summary %s)", len(ds), out, summary)
    return EXIT_OK


def summary_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.name + ".summary.txt")


def read_summary(path) -> dict[str, dict[str, int]]:
    """Label counts from a ``gen-data`` summary file."""
    counts: dict[str, dict[str, int]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        if len(parts) == 3:
            counts.setdefault(parts[0], {})[parts[1]] = int(parts[2])
    return counts


def cmd_train(args) -> int:
    flags = {
        "mode": args.mode,
        "beta1": args.beta1,
        "beta2": args.beta2,
        "beta3": args.beta3,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "inner_steps": args.inner_steps,
        "seed": args.seed,
    }
    flags = {k: v for k, v in flags.items() if v is not None}
    paths = {"dataset": args.data, "out_dir": args.out_dir, "checkpoint": args.resume}

    if args.resume:
        ck = load_checkpoint(args.resume)
        rc = _resolve(args, paths=paths)
        rc.preset, rc.desk = None, False
        # Only the epoch target may change on resume; everything else is the
        # checkpoint's own configuration.
        changed = set(flags) - {"epochs"}
        if changed:
            raise UsageError(f"cannot change {sorted(changed)} when resuming")
        rc.train = rc_mod.apply_overrides(ck.config, {k: flags[k] for k in flags}, "command line")
    else:
        ck = None
        rc = _resolve(args, train_flags=flags, paths=paths)

    data_path = _need_path(rc, "dataset", "--data")
    out_dir = _need_path(rc, "out_dir", "--out-dir")
    if not data_path.exists():
        raise FileNotFoundError(f"dataset not found: {data_path}")
    ds = load_dataset(data_path)

    if ck is None and args.weak_supervision is not None:
        if args.weak_supervision == "on":
            actions = args.actions or len(ds.motion_names)
            beta3 = rc.train.beta3 if rc.train.beta3 > 0 else WEAK_BETA3
            rc.train = rc_mod.apply_overrides(rc.train, {"n_actions": actions, "beta3": beta3}, "--weak-supervision")
        else:
            rc.train = rc_mod.apply_overrides(rc.train, {"n_actions": 0, "beta3": 0.0}, "--weak-supervision")
    try:
        rc.train.validate()
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from None
    text = _announce(rc)

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.ini").write_text(text, encoding="utf-8")
    if ck is None:
        trainer = Trainer(ds, rc.train, check_finite=True)
    else:
        ck.config = rc.train
        trainer = Trainer.from_checkpoint(ck, ds, check_finite=True)

    trainer.fit(
        trace_path=out_dir / "loss_trace.tsv",
        checkpoint_dir=out_dir,
        checkpoint_every=args.checkpoint_every,
    )
    final = out_dir / "final.ckpt"
    save_checkpoint(trainer.checkpoint(), final)
    log.info("wrote %s", final)
    return EXIT_OK


def _load_model(rc: RunConfig):
    ck_path = _need_path(rc, "checkpoint", "--checkpoint")
    ck = load_checkpoint(ck_path)
    model, _ = ck.build()
    model.eval()
    return ck, model


def _eval_common(args, extra_paths: dict):
    paths = {"checkpoint": args.checkpoint, **extra_paths}
    rc = _resolve(args, paths=paths)
    ck, model = _load_model(rc)
    rc.preset, rc.desk = None, False
    rc.train = ck.config
    return rc, ck, model


def report_path(checkpoint_path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.stem + ".eval.tsv")


def cmd_eval(args) -> int:
    rc, ck, model = _eval_common(args, {"dataset": args.data})
    seed = args.seed if args.seed is not None else rc.train.seed
    test_path = _need_path(rc, "dataset", "--data")
    text = _announce(rc)

    test = load_dataset(test_path)
    if tuple(test.frame_shape) != tuple(ck.frame_shape):
        raise ConfigurationError(f"dataset frames {test.frame_shape} do not match the checkpoint {ck.frame_shape}")
    if args.classifier_data:
        clf_data = load_dataset(args.classifier_data)
    else:
        log.warning("no --classifier-data given; fitting the frame classifier on the evaluation set")
        clf_data = test
    _torch_seed(seed)
    clf = train_frame_classifier(clf_data, epochs=args.classifier_epochs, seed=seed)
    records, scores = evaluate(model, test, clf, seed=seed)

    out = Path(args.out) if args.out else report_path(rc.paths["checkpoint"])
    write_report(records, out, config_hash(text))
    if args.scores_out:
        lines = ["feature\ttrial\tscore"]
        for name, trials in scores.items():
            lines += [f"{name}\tsame\t{float(s)!r}" for s in trials.same_scores]
            lines += [f"{name}\tdiff\t{float(s)!r}" for s in trials.diff_scores]
        Path(args.scores_out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for r in records:
        log.info("%s = %.6g (n=%d)", r["metric"], r["value"], r["n"])
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_swap(args) -> int:
    rc, ck, model = _eval_common(args, {"dataset": args.data, "out_dir": None})
    data_path = _need_path(rc, "dataset", "--data")
    _announce(rc)
    ds = load_dataset(data_path)
    for idx in (args.i, args.j):
        if not 0 <= idx < len(ds):
            raise UsageError(f"sequence index {idx} out of range for {len(ds)} sequences")
    x_a = torch.from_numpy(ds.frames[args.i])
    x_b = torch.from_numpy(ds.frames[args.j])
    x_ab, x_ba = swap_generate(model, x_a, x_b)
    rows = [
        reconstruct(model, x_a).numpy() if args.reconstruct_ends else x_a.numpy(),
        x_ab.numpy(),
        x_ba.numpy(),
        reconstruct(model, x_b).numpy() if args.reconstruct_ends else x_b.numpy(),
    ]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pnm(out, tile_rows(rows))
    log.info("wrote swap grid %s", out)
    return EXIT_OK


@torch.no_grad()
def cmd_sample(args) -> int:
    rc, ck, model = _eval_common(args, {"out_dir": args.out_dir})
    seed = args.seed if args.seed is not None else rc.train.seed
    out_dir = _need_path(rc, "out_dir", "--out-dir")
    if args.frames < 1 or args.count < 1:
        raise UsageError("--frames and --count must be positive")
    _announce(rc)
    gen = _torch_seed(seed)
    dtype = next(model.parameters()).dtype
    z_c = torch.randn(args.count, model.d_c, generator=gen, dtype=dtype)
    a = None
    if model.n_actions:
        idx = torch.randint(model.n_actions, (args.count,), generator=gen)
        a = torch.nn.functional.one_hot(idx, model.n_actions).to(dtype)
    z_m = model.prior_rollout(args.count, args.frames, gen, a)
    frames = model.decode(z_c, z_m, a).numpy()
    for s in range(args.count):
        d = out_dir / f"sample_{s:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for t in range(args.frames):
            write_pnm(d / f"frame_{t:04d}.pgm", _frame_image(frames[s, t]))
    log.info("wrote %d samples of %d frames under %s", args.count, args.frames, out_dir)
    return EXIT_OK


# parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rwae", description="Recurrent Wasserstein autoencoder toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="generate a moving-shape dataset")
    common(g)
    g.add_argument("--size", type=int, help="frame height and width")
    g.add_argument("--frames", type=int, help="sequence length T")
    g.add_argument("--count", type=int, help="number of sequences")
    g.add_argument("--shapes", type=_csv(str), help="comma-separated shape types")
    g.add_argument("--motions", type=_csv(str), help="comma-separated motion types")
    g.add_argument("--shape-sizes", type=_csv(int), help="comma-separated shape sizes in pixels")
    g.add_argument("--speed", type=_csv(float), help="min,max speed in pixels per frame")
    g.add_argument("--out", help="dataset file to write")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", help="training dataset file")
    t.add_argument("--out-dir", help="directory for checkpoints and the loss trace")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--desk", action=argparse.BooleanOptionalAction, default=None,
                   help="apply the small-CPU learning rates and epoch budget")
    t.add_argument("--mode", choices=("mmd", "gan"))
    t.add_argument("--weak-supervision", choices=("on", "off"))
    t.add_argument("--actions", type=int, help="number of action categories (default: motion types in the data)")
    t.add_argument("--beta1", type=float)
    t.add_argument("--beta2", type=float)
    t.add_argument("--beta3", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--inner-steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=0, help="save a checkpoint every k epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="labeled test dataset")
    e.add_argument("--classifier-data", help="labeled frames for the content classifier")
    e.add_argument("--classifier-epochs", type=int, default=3)
    e.add_argument("--out", help="report path (default: beside the checkpoint)")
    e.add_argument("--scores-out", help="also write the EER trial scores here")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("swap", help="write a content/motion swap grid")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("i", type=int)
    s.add_argument("j", type=int)
    s.add_argument("--out", required=True, help="PGM file for the 4-row grid")
    s.add_argument("--reconstruct-ends", action="store_true",
                   help="show reconstructions instead of inputs in the first and last rows")
    s.set_defaults(func=cmd_swap)

    m = sub.add_parser("sample", help="generate sequences from the priors")
    common(m)
    m.add_argument("--checkpoint")
    m.add_argument("--frames", type=int, default=8)
    m.add_argument("--count", type=int, default=4)
    m.add_argument("--out-dir")
    m.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except (InvalidArgumentError, ConfigurationError) as exc:
        print(f"rwae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"rwae: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"rwae: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
