"""
Permutation-resolved token error rate (TER) evaluation.
"""
import json
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union
import attr
import editdistance
import numpy as np
from atomicwrites import atomic_write
from m2former.checkpoint import load_checkpoint
from m2former.dataset import load_split
from m2former.decoder import TokenSequence, best_permutation
from m2former.model import M2Former
from m2former.signal import MultiChannelRecording
from m2former.utils import logger


@attr.s(auto_attribs=True, frozen=True)
class UtteranceResult:
    utt_id: str
    # permutation[i] is the reference scored against hypothesis i (after padding)
    permutation: Tuple[int, ...]
    distances: Tuple[int, ...]
    ctc_distances: Tuple[int, ...]
    reference_length: int
    n_speakers: int
    n_estimated: int
    hypotheses: Tuple[Tuple[int, ...], ...]


@attr.s(auto_attribs=True, frozen=True)
class EvalReport:
    token_error_rate: float
    ctc_token_error_rate: float
    speaker_count_accuracy: Optional[float]
    known_count: bool
    per_utterance: List[UtteranceResult]

    @property
    def token_accuracy(self) -> float:
        return 1.0 - self.token_error_rate

    def to_dict(self) -> dict:
        return attr.asdict(self)


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> int:
    return int(editdistance.eval(list(hyp), list(ref)))


def _pad(sequences: Sequence[TokenSequence], n: int) -> List[TokenSequence]:
    return list(sequences) + [TokenSequence([])] * (n - len(sequences))


def score_utterance(
    hyps: Sequence[TokenSequence], refs: Sequence[TokenSequence]
) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    """
    Assign hypotheses to references by minimum total edit distance. The shorter side is padded
    with empty sequences, so surplus hypotheses count as insertions and missing ones as deletions.

    :return: (permutation, per-hypothesis edit distance)
    """
    n = max(len(hyps), len(refs))
    hyps, refs = _pad(hyps, n), _pad(refs, n)
    costs = np.array([[edit_distance(h, r) for r in refs] for h in hyps], dtype=np.float64).reshape(n, n)
    permutation = best_permutation(costs)
    return permutation, tuple(int(costs[i, j]) for i, j in enumerate(permutation))


def token_error_rate(distances: Sequence[int], reference_lengths: Sequence[int]) -> float:
    total = sum(reference_lengths)
    return float(sum(distances)) / total if total else 0.0


def evaluate_model(
    model: M2Former, recordings: Sequence[MultiChannelRecording], known_count: bool = True
) -> EvalReport:
    """ Transcribe every recording and score it against its references. """
    model.eval()
    results = []
    for rec in recordings:
        logger.register_stage(f'eval utt {rec.utt_id}')
        refs = [TokenSequence(tokens) for tokens in rec.transcripts]
        features = model.features(rec)
        out, hyps, ctc_hyps = model.transcribe(features, rec.n_speakers if known_count else None)
        permutation, distances = score_utterance(hyps, refs)
        _, ctc_distances = score_utterance(ctc_hyps, refs)
        results.append(
            UtteranceResult(
                utt_id=rec.utt_id,
                permutation=permutation,
                distances=distances,
                ctc_distances=ctc_distances,
                reference_length=sum(len(r) for r in refs),
                n_speakers=rec.n_speakers,
                n_estimated=len(out.streams),
                hypotheses=tuple(h.tokens for h in hyps),
            )
        )
        logger.debug(f'hyps={[h.tokens for h in hyps]} refs={[r.tokens for r in refs]} distances={distances}')
    logger.register_stage()
    lengths = [r.reference_length for r in results]
    count_accuracy = None
    if not known_count and results:
        count_accuracy = float(np.mean([r.n_estimated == r.n_speakers for r in results]))
    report = EvalReport(
        token_error_rate=token_error_rate([sum(r.distances) for r in results], lengths),
        ctc_token_error_rate=token_error_rate([sum(r.ctc_distances) for r in results], lengths),
        speaker_count_accuracy=count_accuracy,
        known_count=known_count,
        per_utterance=results,
    )
    logger.info(
        f'Evaluated {len(results)} utterances: TER={report.token_error_rate:.4f} '
        f'CTC TER={report.ctc_token_error_rate:.4f} speaker count accuracy={count_accuracy}'
    )
    return report


def evaluate(
    checkpoint: Union[str, Path],
    dataset_dir: Union[str, Path],
    known_count: bool = True,
    split: str = 'test',
) -> EvalReport:
    model, _, _ = load_checkpoint(checkpoint)
    return evaluate_model(model, load_split(Path(dataset_dir) / split), known_count)


def write_report(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with atomic_write(str(path), overwrite=True) as stream:
        json.dump(report.to_dict(), stream, indent=2)
    logger.info(f'Wrote evaluation report to {path}')
    return path
