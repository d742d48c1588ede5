"""Command line front end.

Subcommands cover the whole workflow: generate phantom volumes, train
the two stage-one branches and the guided stage-two net, predict with
a single model or the full cascade, score predictions, and print the
training-memory ledger for a configuration.

Exit codes: 0 on success, 2 for configuration problems (bad flags or
config file contents), 3 for data problems (missing or malformed
volumes and checkpoints).
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import cascade as casc
from . import memory
from .inference import dice_metric, fuse_predict
from .sampler import PatchPlan
from .tensor import Tensor, no_grad
from .train import AdamConfig, TrainConfig, train_network
from .unet import UNet, UNetConfig, dual_patch_config, guided_config
from .volio import PhantomSpec, phantom_generate, read_volume, split_volumes, write_volume

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

BRANCH_SEED_OFFSET = {1.5: 150, 1.75: 175}


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _parse_dims(text: str):
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"bad --dims {text!r}, expected like 64,64,64")
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ConfigError(f"bad --dims {text!r}, expected three positive ints")
    return dims


def _read_json(path: str):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")


def _train_settings(cfg: dict):
    """Pull network / plan / trainer settings out of a config dict."""
    try:
        data_dir = cfg["data_dir"]
        seed = int(cfg.get("seed", 0))
        num_classes = int(cfg.get("num_classes", 3))
        net_cfg = UNetConfig(
            levels=int(cfg.get("levels", 4)),
            encoder_channels=tuple(cfg.get("encoder_channels", (8, 16, 32, 64))),
            decoder_channels=tuple(cfg.get("decoder_channels", (8, 8, 16))),
            in_channels=1,
            num_classes=num_classes,
        )
        plan = PatchPlan(
            patch_edge=int(cfg.get("patch_edge", 32)),
            stride=int(cfg.get("stride", 16)),
            fg_threshold=float(cfg.get("fg_threshold", 0.01)),
            bg_accept_prob=float(cfg.get("bg_accept_prob", 0.3)),
            seed=seed,
            levels=int(cfg.get("levels", 4)),
        )
        tcfg = TrainConfig(
            epochs=int(cfg.get("epochs", 8)),
            patience=int(cfg.get("patience", 30)),
            adam=AdamConfig(lr=float(cfg.get("lr", 9e-4))),
            num_classes=num_classes,
            seed=seed,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad training config: {e}")
    try:
        net_cfg.validate()
        plan.validate()
    except ValueError as e:
        raise ConfigError(str(e))
    return data_dir, seed, net_cfg, plan, tcfg


def _load_corpus(data_dir: str):
    """Load every <id>.vol / <id>.labels.vol pair under a directory."""
    if not os.path.isdir(data_dir):
        raise DataError(f"data directory not found: {data_dir}")
    ids = sorted(name[:-len(".labels.vol")] for name in os.listdir(data_dir)
                 if name.endswith(".labels.vol"))
    if not ids:
        raise DataError(f"no label volumes (*.labels.vol) under {data_dir}")
    corpus = []
    for vid in ids:
        try:
            image, _ = read_volume(os.path.join(data_dir, vid + ".vol"))
            labels, _ = read_volume(os.path.join(data_dir, vid + ".labels.vol"))
        except (OSError, ValueError) as e:
            raise DataError(str(e))
        corpus.append((vid, image, labels.astype(np.int64)))
    return corpus


def _split_corpus(corpus, seed: int):
    ids = [vid for vid, _, _ in corpus]
    by_id = {vid: (vid, img, lab) for vid, img, lab in corpus}
    train_ids, val_ids, test_ids = split_volumes(ids, seed)
    pick = lambda sel: [by_id[v] for v in sel]
    return pick(train_ids), pick(val_ids), pick(test_ids)


def _load_net(path: str) -> UNet:
    try:
        return UNet.load(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}")


def cmd_phantom(args) -> int:
    dims = _parse_dims(args.dims)
    os.makedirs(args.out_dir, exist_ok=True)
    ids = []
    for i in range(args.count):
        spec = PhantomSpec(dims=dims, seed=args.seed + i)
        try:
            image, labels = phantom_generate(spec)
        except ValueError as e:
            raise DataError(str(e))
        vid = f"ph{i:03d}"
        write_volume(os.path.join(args.out_dir, vid + ".vol"), image,
                     spacing_um=spec.spacing_um)
        write_volume(os.path.join(args.out_dir, vid + ".labels.vol"), labels,
                     spacing_um=spec.spacing_um)
        ids.append(vid)
    with open(os.path.join(args.out_dir, "index.json"), "w") as f:
        json.dump({"volumes": ids, "dims": list(dims), "seed": args.seed}, f, indent=1)
    print(f"wrote {len(ids)} phantom volumes to {args.out_dir}")
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg = _read_json(args.config)
    data_dir, seed, net_cfg, plan, tcfg = _train_settings(cfg)
    k = args.branch_k
    offset = BRANCH_SEED_OFFSET[k]
    plan = dataclasses.replace(plan, expand_factor=k, seed=seed + offset)
    try:
        plan.validate()
    except ValueError as e:
        raise ConfigError(str(e))
    tcfg.seed = seed + offset
    tcfg.out_dir = args.out

    corpus = _load_corpus(data_dir)
    train_set, val_set, _ = _split_corpus(corpus, seed)
    net = UNet(dual_patch_config(net_cfg), seed=seed + offset)
    result = train_network(net, train_set, val_set, plan, tcfg)
    print(f"stage-1 branch k={k}: best val foreground dice "
          f"{result.best_metric:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint: {result.checkpoint_dir}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = _read_json(args.config)
    data_dir, seed, net_cfg, plan, tcfg = _train_settings(cfg)
    tcfg.out_dir = args.out
    branch_a = _load_net(args.stage1_a)
    branch_b = _load_net(args.stage1_b)

    corpus = _load_corpus(data_dir)
    train_set, val_set, _ = _split_corpus(corpus, seed)
    cache_dir = os.path.join(args.out, "cache")
    stage1_labels = {}
    for vid, image, _ in train_set + val_set:
        _, labels = casc.stage1_predict_full(
            [branch_a, branch_b], image, vid, plan.patch_edge, plan.stride,
            tcfg.num_classes, cache_dir=cache_dir)
        stage1_labels[vid] = labels
    net = UNet(guided_config(net_cfg), seed=seed + 200)
    result = casc.train_stage2(net, train_set, val_set, stage1_labels, plan, tcfg)
    print(f"stage-2: best val foreground dice {result.best_metric:.4f} "
          f"at epoch {result.best_epoch}")
    print(f"checkpoint: {result.checkpoint_dir}")
    return EXIT_OK


def cmd_predict(args) -> int:
    net = _load_net(args.model)
    try:
        image, _ = read_volume(args.in_path)
    except (OSError, ValueError) as e:
        raise DataError(str(e))
    if image.ndim != 3:
        raise DataError(f"predict needs a 3-d image volume, got dims {image.shape}")
    vid = os.path.basename(args.in_path)
    if vid.endswith(".vol"):
        vid = vid[:-4]
    k = net.config.num_classes

    if net.config.guidance_classes > 0:
        if not (args.stage1_a and args.stage1_b):
            raise ConfigError(
                "guided model needs --stage1-a and --stage1-b checkpoints")
        branches = [_load_net(args.stage1_a), _load_net(args.stage1_b)]
        probs, labels, _ = casc.cascade_predict(
            branches, net, image, vid, args.patch_edge, args.stride, k,
            cache_dir=args.cache_dir)
    else:
        net.eval()
        with no_grad():
            def predict(patch, origin):
                x = Tensor(np.ascontiguousarray(patch, dtype=net.dtype)[None, None])
                return net.forward(x).data[0]
            probs, labels = fuse_predict(predict, image, args.patch_edge,
                                         args.stride, k)
    write_volume(args.out, labels.astype(np.uint8))
    if args.probs_out:
        write_volume(args.probs_out, np.asarray(probs, dtype=np.float32))
    print(f"wrote labels to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        pred, _ = read_volume(args.pred)
        truth, _ = read_volume(args.truth)
    except (OSError, ValueError) as e:
        raise DataError(str(e))
    if pred.shape != truth.shape:
        raise DataError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    k = max(int(pred.max()), int(truth.max())) + 1
    k = max(k, args.classes)
    dice = dice_metric(pred, truth, k)
    print("class,dice")
    for i, d in enumerate(dice):
        print(f"{i},{d:.6f}")
    return EXIT_OK


def cmd_memreport(args) -> int:
    try:
        cfg = memory.load_config(args.config)
    except (OSError, KeyError, TypeError) as e:
        raise ConfigError(f"bad ledger config {args.config}: {e}")
    except ValueError as e:
        raise ConfigError(str(e))
    report = memory.estimate(cfg)
    if args.compare:
        try:
            other = memory.load_config(args.compare)
        except (OSError, KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad ledger config {args.compare}: {e}")
        comp = memory.compare(report, memory.estimate(other))
        if args.json:
            print(json.dumps(comp.to_json(), indent=1, sort_keys=True))
        else:
            print(comp.render_text())
    else:
        if args.json:
            print(json.dumps(report.to_json(), indent=1, sort_keys=True))
        else:
            print(report.render_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascadeseg",
                                description="volumetric segmentation cascade")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("phantom", help="generate synthetic tube phantoms")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--dims", default="64,64,64")
    q.add_argument("--out-dir", required=True)
    q.add_argument("--count", type=int, default=1)
    q.set_defaults(run=cmd_phantom)

    q = sub.add_parser("train-stage1", help="train one wide-context branch")
    q.add_argument("--config", required=True)
    q.add_argument("--branch-k", type=float, required=True, choices=[1.5, 1.75])
    q.add_argument("--out", required=True)
    q.set_defaults(run=cmd_train_stage1)

    q = sub.add_parser("train-stage2", help="train the guided refinement net")
    q.add_argument("--config", required=True)
    q.add_argument("--stage1-a", required=True)
    q.add_argument("--stage1-b", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(run=cmd_train_stage2)

    q = sub.add_parser("predict", help="segment a volume")
    q.add_argument("--model", required=True)
    q.add_argument("--stage1-a")
    q.add_argument("--stage1-b")
    q.add_argument("--in", dest="in_path", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--probs-out")
    q.add_argument("--patch-edge", type=int, default=32)
    q.add_argument("--stride", type=int, default=16)
    q.add_argument("--cache-dir")
    q.set_defaults(run=cmd_predict)

    q = sub.add_parser("eval", help="per-class Dice of a prediction")
    q.add_argument("--pred", required=True)
    q.add_argument("--truth", required=True)
    q.add_argument("--classes", type=int, default=3)
    q.set_defaults(run=cmd_eval)

    q = sub.add_parser("memreport", help="training memory ledger")
    q.add_argument("--config", required=True)
    q.add_argument("--compare")
    q.add_argument("--json", action="store_true")
    q.set_defaults(run=cmd_memreport)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed a usage message
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
