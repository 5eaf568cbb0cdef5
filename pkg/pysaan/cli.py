"""
命令行入口
Command-Line Dispatch

子命令: gen-data, train, eval, predict, inspect-attn, ablate
Subcommands gen-data, train, eval, predict, inspect-attn and ablate. Stdout
carries a JSON reproducibility header followed by machine-readable results
(JSON or CSV); human-readable progress goes to stderr and the run log.
"""

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict
from typing import Any, Dict, List, Optional, Sequence, TextIO

import numpy as np
import orjson
from dotenv import load_dotenv

from . import __version__
from .autodiff import Tensor, no_grad
from .checkpoint import load_checkpoint, restore_model
from .config import build, effective_config, encoder_config, merge, read_config_file, resolve_flags
from .data import SceneSpec, build_manifest, load_manifest, stack_batch
from .errors import SaanError, UsageError
from .losses import evaluate_binary_masks
from .model import ABLATION_PRESETS, DecoderConfig, export_attention_maps, predict_proba
from .netpbm import read_image, write_image
from .trainer import ABLATION_COLUMNS, TrainConfig, evaluate, run_ablation, train
from utils.logger_config import LoggerConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0


class SaanArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _counts(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated integers, got {text!r}')


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument('--config', help='key = value config file; flags override its values')
    p.add_argument('--log-dir', help='run log directory (default $SAAN_LOG_DIR or ./log)')
    p.add_argument('--seed', type=int)


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument('--preset', choices=sorted(ABLATION_PRESETS), help='ablation flag row')
    p.add_argument('--variant', choices=('mini', 'resnet18'))
    p.add_argument('--flow-init', dest='flow_init', choices=('constant', 'omit'))
    p.add_argument('--channel-attention-input', dest='channel_attention_input', choices=('weighted', 'raw'))


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument('--data', required=True, help='dataset directory or manifest file')
    p.add_argument('--epochs', dest='max_epochs', type=int)
    p.add_argument('--lr', dest='lr0', type=float)
    p.add_argument('--batch-size', dest='batch_size', type=int)
    p.add_argument('--weight-decay', dest='weight_decay', type=float)
    p.add_argument('--decoupled-weight-decay', dest='decoupled_weight_decay', action='store_true', default=None)
    p.add_argument('--val-metric', dest='val_metric', choices=('f1', 'accuracy'))
    p.add_argument('--max-steps-per-epoch', dest='max_steps_per_epoch', type=int)
    p.add_argument('--no-augment', dest='augment', action='store_false', default=None)


def build_parser() -> SaanArgumentParser:
    parser = SaanArgumentParser(prog='pysaan', description='Similarity-aware attention change detection')
    parser.add_argument('--version', action='version', version=f'pysaan {__version__}')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=SaanArgumentParser)

    p = sub.add_parser('gen-data', help='generate a synthetic dataset and manifest')
    _add_common(p)
    p.add_argument('--out', required=True)
    p.add_argument('--size', type=int)
    p.add_argument('--channels', type=int)
    p.add_argument('--counts', type=_counts, default=None, help='train,val,test pair counts (default 512,128,128)')

    p = sub.add_parser('train', help='train a model on a dataset')
    _add_common(p)
    _add_model(p)
    _add_train(p)
    p.add_argument('--out', required=True, help='run directory for checkpoints and logs')
    p.add_argument('--plot', action='store_true', default=None, help='write history.png')

    p = sub.add_parser('eval', help='score a checkpoint or saved predictions on a split')
    _add_common(p)
    p.add_argument('--data', required=True)
    p.add_argument('--split', default='test', choices=('train', 'val', 'test'))
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument('--checkpoint')
    group.add_argument('--predictions', help='directory of <index>.pgm prediction masks')
    p.add_argument('--batch-size', dest='batch_size', type=int, default=8)
    p.add_argument('--threshold', type=float, default=0.5)
    p.add_argument('--per-tile', action='store_true')

    p = sub.add_parser('predict', help='write change-map PGMs')
    _add_common(p)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--t1')
    p.add_argument('--t2')
    p.add_argument('--data', help='predict a whole split instead of one pair')
    p.add_argument('--split', default='test', choices=('train', 'val', 'test'))
    p.add_argument('--out', required=True, help='output PGM (pair) or directory (split)')
    p.add_argument('--threshold', type=float, default=0.5)
    p.add_argument('--batch-size', dest='batch_size', type=int, default=8)

    p = sub.add_parser('inspect-attn', help='export attention maps of one pair')
    _add_common(p)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--t1', required=True)
    p.add_argument('--t2', required=True)
    p.add_argument('--out', required=True)

    p = sub.add_parser('ablate', help='train the ablation flag grid and emit a comparison CSV')
    _add_common(p)
    _add_model(p)
    _add_train(p)
    p.add_argument('--out', help='directory for per-row runs and ablation.csv')
    p.add_argument('--rows', default='opt-a,opt-d,full', help='comma-separated ablation presets')
    p.add_argument('--repeats', type=int, default=1)
    p.add_argument('--split', default='test', choices=('train', 'val', 'test'))
    return parser


# ==================== 输出 ====================

def _emit_json(stream: TextIO, obj: Any) -> None:
    stream.write(orjson.dumps(obj, default=str, option=orjson.OPT_SERIALIZE_NUMPY).decode() + '\n')


def _header(stream: TextIO, command: str, values: Dict[str, Any]) -> Dict[str, Any]:
    config = effective_config(values)
    header = {'tool': 'pysaan', 'version': __version__, 'command': command,
              'seed': config['train']['seed'], 'config': config}
    _emit_json(stream, header)
    logger.info(f"⚙️ effective config: {orjson.dumps(config, default=str).decode()}")
    return config


def _setup_logging(command: str, log_dir: Optional[str]) -> logging.Logger:
    cfg = LoggerConfig.from_env()
    if log_dir:
        cfg.log_dir = log_dir
    return cfg.get_run_logger(command.replace('-', '_'), package='pysaan')


def _load_pair(t1_path: str, t2_path: str):
    t1, t2 = read_image(t1_path), read_image(t2_path)
    return t1[None], t2[None]


# ==================== 子命令 ====================

def cmd_gen_data(args, values, out: TextIO) -> int:
    spec = build(SceneSpec, values)
    counts = args.counts or [512, 128, 128]
    manifest = build_manifest(spec, args.out, counts)
    _emit_json(out, {'root': args.out, 'counts': manifest.counts()})
    return EXIT_OK


def _train_inputs(values):
    flags = resolve_flags(values)
    return build(TrainConfig, values, flags=flags), encoder_config(values), build(DecoderConfig, values)


def cmd_train(args, values, out: TextIO) -> int:
    config, enc, dec = _train_inputs(values)
    manifest = load_manifest(args.data)
    result = train(config, manifest, args.out, enc, dec)
    last = result.epochs[-1]
    _emit_json(out, {'epochs': len(result.epochs), 'best_score': result.best.best_score,
                     'val_metric': config.val_metric, 'last': asdict(last),
                     'checkpoint': os.path.join(args.out, 'best.ckpt'), 'stopped_early': result.stopped_early})
    return EXIT_OK


def cmd_eval(args, values, out: TextIO) -> int:
    manifest = load_manifest(args.data)
    entries = manifest.split(args.split)
    if args.predictions:
        preds = [read_image(os.path.join(args.predictions, f'{e.index}.pgm')) for e in entries]
        masks = [read_image(manifest.resolve(e.mask)) for e in entries]
        report = evaluate_binary_masks(preds, masks, args.threshold)
        _emit_json(out, report.to_dict())
        return EXIT_OK
    result = evaluate(args.checkpoint, manifest, args.split, args.batch_size, args.threshold)
    payload = result.aggregate.to_dict()
    payload['separation'] = result.separation.to_dict()
    if args.per_tile:
        payload['per_tile'] = [{'index': i, **r.to_dict()} for i, r in zip(result.indices, result.per_tile)]
    _emit_json(out, payload)
    return EXIT_OK


def _write_mask(path: str, probs: np.ndarray, threshold: float) -> int:
    mask = (probs > threshold).astype(np.float32)
    write_image(path, mask)
    return int(mask.sum())


def cmd_predict(args, values, out: TextIO) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    if args.data:
        manifest = load_manifest(args.data)
        entries = manifest.split(args.split)
        written = []
        for start in range(0, len(entries), args.batch_size):
            chunk = entries[start:start + args.batch_size]
            t1, t2, _ = stack_batch([manifest.load_pair(e) for e in chunk])
            probs = predict_proba(model, t1, t2)
            for e, p in zip(chunk, probs):
                path = os.path.join(args.out, f'{e.index}.pgm')
                written.append({'index': e.index, 'file': path, 'changed': _write_mask(path, p, args.threshold)})
        _emit_json(out, {'split': args.split, 'predictions': written})
        return EXIT_OK
    if not (args.t1 and args.t2):
        raise UsageError('predict needs --t1 and --t2, or --data')
    t1, t2 = _load_pair(args.t1, args.t2)
    probs = predict_proba(model, t1, t2)
    _emit_json(out, {'file': args.out, 'changed': _write_mask(args.out, probs[0], args.threshold)})
    return EXIT_OK


def cmd_inspect_attn(args, values, out: TextIO) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    t1, t2 = _load_pair(args.t1, args.t2)
    with no_grad():
        result = model(Tensor(t1), Tensor(t2))
    files = export_attention_maps(result.attention, args.out)
    _emit_json(out, {'directory': args.out, 'files': [os.path.basename(f) for f in files]})
    return EXIT_OK


def cmd_ablate(args, values, out: TextIO) -> int:
    config, enc, dec = _train_inputs(values)
    rows = [r.strip() for r in args.rows.split(',') if r.strip()]
    unknown = [r for r in rows if r.lower() not in ABLATION_PRESETS]
    if not rows or unknown:
        raise UsageError('unknown ablation rows', {'unknown': unknown, 'known': sorted(ABLATION_PRESETS)})
    manifest = load_manifest(args.data)
    results = run_ablation(config, manifest, rows, args.repeats, args.split, enc, dec, args.out)
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(ABLATION_COLUMNS)
    writer.writerows(r.row() for r in results)
    return EXIT_OK


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'eval': cmd_eval,
    'predict': cmd_predict,
    'inspect-attn': cmd_inspect_attn,
    'ablate': cmd_ablate,
}

# 命令行参数名 -> 配置键
_NON_CONFIG_ARGS = {'command', 'config', 'log_dir', 'out', 'data', 'counts', 'checkpoint', 'predictions',
                    'split', 'threshold', 'per_tile', 't1', 't2', 'rows', 'repeats'}


def dispatch(argv: Optional[Sequence[str]] = None, stdout: TextIO = None) -> int:
    """Run one command; returns the process exit code."""
    stdout = stdout or sys.stdout
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
        run_logger = _setup_logging(args.command, args.log_dir)
        file_values = read_config_file(args.config) if args.config else None
        cli_values = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG_ARGS}
        if args.command in ('eval', 'predict', 'inspect-attn'):
            cli_values.pop('batch_size', None)
        values = merge(file_values, cli_values)
        _header(stdout, args.command, values)
        code = COMMANDS[args.command](args, values, stdout)
        run_logger.info(f"✅ {args.command} finished")
        return code
    except SaanError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        print(f'error: {e}', file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"❌ I/O error: {e}")
        print(f'error: {e}', file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception(f"❌ unexpected {type(e).__name__}: {e}")
        print(f'error: {type(e).__name__}: {e}', file=sys.stderr)
        return 2
