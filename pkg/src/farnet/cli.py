"""Command-line surface: train, evaluate, predict, selftest.

Exit codes: 0 success, 2 configuration problem, 3 data or I/O problem,
4 numeric abort (non-finite loss), 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import (
    CheckpointError,
    ComparisonError,
    ConfigError,
    DataError,
    FrameError,
    GenerationError,
    NumericsError,
    ParameterError,
    ResourceError,
    ShapeError,
)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (ConfigError, ParameterError, FrameError, ShapeError, ComparisonError)
_DATA_ERRORS = (DataError, ResourceError, CheckpointError, GenerationError, OSError)


def _cmd_train(args) -> int:
    from .config import load_run_config, save_run_config
    from .engine import train

    config = load_run_config(args.config)
    if args.checkpoint_dir:
        config.checkpoint_dir = args.checkpoint_dir
    if args.epochs:
        config.epochs = args.epochs
    if args.seed is not None:
        config.seed = args.seed
    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(config, ckpt_dir / "config_used.yaml")
    result = train(config)
    print(f"final training loss : {result.loss_curve[-1]:.8f}")
    if result.val_curve:
        epoch, value = min(result.val_curve, key=lambda t: t[1])
        print(f"best validation MRE : {value:.4f} (epoch {epoch})")
    print(f"best checkpoint     : {result.best_path}")
    print(f"last checkpoint     : {result.last_path}")
    return 0


def _cmd_evaluate(args) -> int:
    from .config import load_dataset_spec
    from .engine import evaluate, load_checkpoint

    checkpoint = load_checkpoint(args.checkpoint)
    spec = load_dataset_spec(args.dataset)
    if args.split:
        spec = spec.with_(split=args.split)
    report = evaluate(checkpoint, spec)
    print(report.to_text())
    if args.out:
        report.save(args.out, stem=f"report_{spec.kind.value}_{spec.split}")
        print(f"report written under {args.out}")
    return 0


def _cmd_predict(args) -> int:
    from .engine import load_checkpoint, predict

    predict(load_checkpoint(args.checkpoint), args.image, args.out)
    return 0


def _selftest_checks():
    """Small built-in property battery; each check returns (name, detail)."""
    import torch

    from .heatmaps import (
        Frame,
        HeatmapGrid,
        LandmarkSet,
        decode_landmarks,
        encode_heatmap_stack,
    )
    from .losses import ewc_loss, ewc_loss_grad, l2_heatmap_loss
    from .metrics import sdr, spine_metrics
    from .model import ChannelSchedule, ModelConfig, build_model

    rng = np.random.default_rng(7)

    def check_roundtrip():
        grid = HeatmapGrid(64, 64, stride_wrt_input=1)
        pts = rng.uniform(2, 61, size=(20, 2))
        lms = LandmarkSet(pts, Frame.HEATMAP_L0)
        decoded = decode_landmarks(encode_heatmap_stack(lms, grid, sigma=10.0))
        worst = float(np.abs(decoded.points - pts).max())
        assert worst < 0.5, f"round-trip error {worst:.4f} px"
        return f"worst offset {worst:.4f} px over 20 landmarks"

    def check_loss_identity():
        for _ in range(20):
            gt = rng.random((3, 8, 8))
            pred = rng.random((3, 8, 8))
            gap = abs(ewc_loss(pred, gt, alpha=1.0) - l2_heatmap_loss(pred, gt))
            assert gap < 1e-12, f"alpha=1 gap {gap:.3e}"
        return "alpha=1 matches plain L2 on 20 stacks"

    def check_gradient():
        gt = rng.random((2, 6, 6))
        pred = rng.random((2, 6, 6))
        analytic = ewc_loss_grad(pred, gt, alpha=40.0)
        step = 1e-4
        worst = 0.0
        for idx in [(0, 1, 2), (1, 3, 4), (0, 5, 5)]:
            plus, minus = pred.copy(), pred.copy()
            plus[idx] += step
            minus[idx] -= step
            numeric = (ewc_loss(plus, gt, 40.0) - ewc_loss(minus, gt, 40.0)) / (2 * step)
            worst = max(worst, abs(numeric - analytic[idx]) / max(abs(numeric), 1e-12))
        assert worst < 1e-4, f"gradient mismatch {worst:.3e}"
        return f"max rel gradient error {worst:.2e}"

    def check_shapes():
        config = ModelConfig(
            backbone="toy", k_landmarks=4, schedule=ChannelSchedule.compact()
        )
        model = build_model(config).eval()
        with torch.no_grad():
            out = model(torch.zeros(1, 3, 128, 128))
        assert tuple(out.coarse.shape) == (1, 4, 64, 64), tuple(out.coarse.shape)
        assert tuple(out.fine.shape) == (1, 4, 128, 128), tuple(out.fine.shape)
        return "toy forward: coarse 4x64x64, fine 4x128x128"

    def check_metrics():
        base = np.arange(10, dtype=np.float64).reshape(5, 2) * 7.0 + 10.0
        gt = [LandmarkSet(base, Frame.ORIGINAL)]
        pred = [LandmarkSet(base + 10.0, Frame.ORIGINAL)]
        mse, rho = spine_metrics(pred, gt, [(100, 100)])
        # 0.1 is not a dyadic fraction, so the comparison needs an epsilon
        assert abs(mse - 0.010) < 1e-12, f"mse_fraction {mse!r}"
        assert abs(rho - 1.0) < 1e-9, f"rho {rho!r}"
        rates = sdr([1.0, 2.0, 3.0], [1.5, 2.5])
        assert rates[1.5] <= rates[2.5], "SDR not monotonic"
        return "10 px shift on 100x100 -> mse 0.010, rho 1; SDR monotonic"

    return [
        ("encode/decode round trip", check_roundtrip),
        ("ewc alpha=1 is l2", check_loss_identity),
        ("ewc analytic gradient", check_gradient),
        ("toy forward shapes", check_shapes),
        ("metric calibration", check_metrics),
    ]


def _cmd_selftest(_args) -> int:
    failures = 0
    for name, check in _selftest_checks():
        try:
            detail = check()
            print(f"PASS {name}: {detail}")
        except AssertionError as exc:
            failures += 1
            print(f"FAIL {name}: {exc}")
        except Exception as exc:  # one broken check must not take down the battery
            failures += 1
            print(f"FAIL {name}: unexpected {type(exc).__name__}: {exc}")
    if failures:
        print(f"{failures} check(s) failed")
        return 1
    print("all selftest checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="farnet",
        description="Anatomical landmark detection via coarse-to-fine heatmap regression.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a YAML run config")
    p_train.add_argument("--config", required=True, help="run config file (YAML)")
    p_train.add_argument("--checkpoint-dir", help="override the config's checkpoint_dir")
    p_train.add_argument("--epochs", type=int, help="override the config's epoch count")
    p_train.add_argument("--seed", type=int, help="override the config's seed")
    p_train.set_defaults(fn=_cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True, help="dataset spec file (YAML)")
    p_eval.add_argument("--split", help="override the dataset file's split")
    p_eval.add_argument("--out", help="directory for the text/key-value report files")
    p_eval.set_defaults(fn=_cmd_evaluate)

    p_pred = sub.add_parser("predict", help="detect landmarks on one image")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--image", required=True)
    p_pred.add_argument("--out", required=True, help="output directory")
    p_pred.set_defaults(fn=_cmd_predict)

    p_self = sub.add_parser("selftest", help="run the built-in property checks")
    p_self.set_defaults(fn=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except NumericsError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
