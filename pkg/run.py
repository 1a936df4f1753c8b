import sys
from argparse import ArgumentParser
from pathlib import Path
import attr
from config import Config
from m2former.ablation import run_ablation
from m2former.config import PRESETS, load_config, preset
from m2former.constants import REPORT_JSON
from m2former.dataset import generate_dataset
from m2former.evaluate import evaluate, write_report
from m2former.signal import MixtureConfig
from m2former.train import train
from m2former.utils import attach_excepthook, configure_logging, logger

log_level_parser = ArgumentParser(add_help=False)
log_level_parser.add_argument(
    '--log-level',
    help='Logging level',
    type=str,
    default='INFO',
    choices=['NOTSET', 'DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
)

# Attach custom excepthook
attach_excepthook()

parser = ArgumentParser(
    description='Multi-channel multi-speaker speech recognition', parents=[log_level_parser]
)
subparsers = parser.add_subparsers(title='cmd', dest='cmd')

parser_gen_data = subparsers.add_parser('gen-data', parents=[log_level_parser])
parser_gen_data.add_argument('--speakers', type=int, default=2, help='Speakers per utterance')
parser_gen_data.add_argument('--mics', type=int, default=4, help='Microphones')
parser_gen_data.add_argument('--utts', type=int, default=200, help='Training utterances')
parser_gen_data.add_argument('--test-utts', type=int, default=50, help='Test utterances')
parser_gen_data.add_argument('--snr-db', type=float, default=10.0, help='Mixture SNR (dB)')
parser_gen_data.add_argument('--tokens', type=int, default=8, help='Alphabet size (without blank)')
parser_gen_data.add_argument('--seed', type=int, default=0, help='Dataset seed')
parser_gen_data.add_argument('--out', required=True, help='Output directory')


def add_config_arguments(p: ArgumentParser):
    p.add_argument('--config', help='Experiment config file (section.key = value lines)')
    p.add_argument('--preset', choices=PRESETS, default='desk', help='Base configuration')
    p.add_argument(
        '--paper-scale', action='store_true', help='Shortcut for --preset paper'
    )


parser_train = subparsers.add_parser('train', parents=[log_level_parser])
add_config_arguments(parser_train)
parser_train.add_argument('--data', required=True, help='Dataset directory (from gen-data)')
parser_train.add_argument('--out', required=True, help='Output directory')

parser_eval = subparsers.add_parser('eval', parents=[log_level_parser])
parser_eval.add_argument('--ckpt', required=True, help='Checkpoint path')
parser_eval.add_argument('--data', required=True, help='Dataset directory (from gen-data)')
parser_eval.add_argument('--split', default='test', choices=['train', 'test'])
parser_eval.add_argument(
    '--unknown-count', action='store_true', help='Estimate the speaker count (eigengap)'
)
parser_eval.add_argument('--out', help='Report path (default: report.json next to the checkpoint)')

parser_ablate = subparsers.add_parser('ablate', parents=[log_level_parser])
add_config_arguments(parser_ablate)
parser_ablate.add_argument(
    '--axes',
    default='',
    help='Comma-separated cells, e.g. "cnndd,m2a1,m2a2,ifsd,mct,cnndd+mct"',
)
parser_ablate.add_argument('--data', required=True, help='Dataset directory (from gen-data)')
parser_ablate.add_argument('--out', required=True, help='Output directory')
parser_ablate.add_argument(
    '--workers', type=int, default=Config.WORKERS, help='Concurrent cell processes'
)


def experiment_config(args):
    base = preset('paper' if args.paper_scale else args.preset)
    if args.config is None:
        return base
    return load_config(args.config, base)


def gen_data(args):
    mixture = MixtureConfig(n_speakers=args.speakers, n_mics=args.mics, snr_db=args.snr_db)
    alphabet_spec = {'n_tokens': args.tokens, 'seed': args.seed}
    logger.info(f'Generate dataset: {attr.asdict(mixture)}')
    generate_dataset(mixture, alphabet_spec, args.utts, args.test_utts, args.seed, args.out)


def train_cmd(args):
    train(experiment_config(args), args.data, args.out)


def eval_cmd(args):
    report = evaluate(args.ckpt, args.data, known_count=not args.unknown_count, split=args.split)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / REPORT_JSON
    write_report(report, out)


def ablate(args):
    axes = [axis for axis in args.axes.split(',') if axis.strip()]
    run_ablation(experiment_config(args), axes, args.data, args.out, workers=args.workers)


commands = {'gen-data': gen_data, 'train': train_cmd, 'eval': eval_cmd, 'ablate': ablate}


def main(argv=None):
    args = parser.parse_args(argv)
    configure_logging(log_level=args.log_level)
    if args.cmd is None:
        parser.print_help()
        return
    command = commands[args.cmd]
    sys.exit(command(args))


if __name__ == '__main__':
    main()
