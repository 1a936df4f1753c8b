"""
Per-speaker transformer decoder, CTC and attention losses, and permutation invariant training.

Token ids: 0 is the CTC blank and doubles as the decoder's start/end symbol; real tokens are 1..n.
"""
import itertools
from typing import List, Sequence, Tuple
import attr
import numpy as np
from m2former.constants import BLANK_ID, EOS_ID, MAX_PIT_SPEAKERS, SOS_ID
from m2former.exc import AlignmentError, PermutationError, ShapeError
from m2former.nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, sinusoidal_encoding, uniform_init
from m2former.tensor import Parameter, Tensor, log_softmax, no_grad, tensor_from_op


def _tokens(values) -> Tuple[int, ...]:
    return tuple(int(v) for v in values)


def _no_blank(instance, attribute, tokens):
    if any(t == BLANK_ID for t in tokens):
        raise ValueError(f'Token sequence must not contain the blank id {BLANK_ID}: {tokens}')


@attr.s(auto_attribs=True, frozen=True)
class TokenSequence:
    tokens: Tuple[int, ...] = attr.ib(converter=_tokens, validator=_no_blank)

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


def _unit_interval(instance, attribute, value):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f'{attribute.name} must be in [0, 1], got {value}')


def _smoothing_range(instance, attribute, value):
    if not 0.0 <= value < 1.0:
        raise ValueError(f'{attribute.name} must be in [0, 1), got {value}')


@attr.s(auto_attribs=True, frozen=True)
class LossConfig:
    """ lam weights the CTC term, 1 - lam the attention term. """

    lam: float = attr.ib(default=0.3, validator=_unit_interval)
    smoothing: float = attr.ib(default=0.1, validator=_smoothing_range)


@attr.s(auto_attribs=True, frozen=True, eq=False)
class PitResult:
    """
    permutation[i] is the reference index assigned to speaker output i.
    per_pair_ctc[i, j] is the CTC loss of output i against reference j.
    """

    permutation: Tuple[int, ...]
    per_pair_ctc: np.ndarray
    total_loss: Tensor
    ctc_loss: float
    att_loss: float


# Decoder ----------------------------------------------------------------------------------------


class DecoderBlock(Module):
    """ Pre-norm causal self-attention, cross-attention to the encoder output and feed-forward. """

    def __init__(self, d_model: int, heads: int, d_ff: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        self.norm_self = LayerNorm(d_model)
        self.self_attention = MultiHeadAttention(d_model, heads, rng)
        self.norm_src = LayerNorm(d_model)
        self.src_attention = MultiHeadAttention(d_model, heads, rng)
        self.norm_ff = LayerNorm(d_model)
        self.feed_forward = FeedForward(d_model, d_ff, rng, dropout_rate)

    def forward(self, h: Tensor, memory: Tensor, causal: np.ndarray) -> Tensor:
        n = self.norm_self(h)
        h = h + self.self_attention(n, n, causal)
        h = h + self.src_attention(self.norm_src(h), memory)
        return h + self.feed_forward(self.norm_ff(h))


class Decoder(Module):
    def __init__(
        self,
        vocab_size: int,
        d_model: int,
        heads: int,
        d_ff: int,
        n_blocks: int,
        rng: np.random.Generator,
        dropout_rate: float = 0.0,
    ):
        self.d_model = d_model
        self.embedding = Parameter(uniform_init(rng, (vocab_size, d_model), d_model))
        self.blocks = [DecoderBlock(d_model, heads, d_ff, rng, dropout_rate) for _ in range(n_blocks)]
        self.norm_out = LayerNorm(d_model)
        self.output = Linear(d_model, vocab_size, rng)

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    def logits(self, enc: Tensor, input_ids: Sequence[int]) -> Tensor:
        """
        :param enc: Encoder output of one speaker, T' x d_model
        :param input_ids: Decoder input starting with the start symbol
        :return: len(input_ids) x vocab_size logits
        """
        if enc.ndim != 2 or enc.shape[0] == 0:
            raise ShapeError(f'Decoder needs a non-empty T x d encoder sequence, got {enc.shape}')
        if enc.shape[1] != self.d_model:
            raise ShapeError(f'Decoder expects d_model {self.d_model}, got {enc.shape}')
        length = len(input_ids)
        h = self.embedding[np.asarray(input_ids, dtype=np.int64)]
        h = (h + Tensor(sinusoidal_encoding(length, self.d_model))).reshape(1, length, self.d_model)
        memory = enc.reshape(1, *enc.shape)
        causal = np.tril(np.ones((length, length), dtype=bool))
        for block in self.blocks:
            h = block(h, memory, causal)
        return self.output(self.norm_out(h)).reshape(length, self.vocab_size)

    def forward(self, enc: Tensor, targets: TokenSequence) -> Tensor:
        """ Teacher-forced logits, one row per target token plus the end symbol. """
        return self.logits(enc, (SOS_ID,) + targets.tokens)


def decoder_forward(enc: Tensor, targets: TokenSequence, decoder: Decoder) -> Tensor:
    return decoder(enc, targets)


def greedy_decode(enc: Tensor, decoder: Decoder, max_len: int) -> TokenSequence:
    """ Autoregressive argmax until the end symbol or max_len tokens. """
    tokens = []
    with no_grad():
        for _ in range(max_len):
            logits = decoder.logits(enc, [SOS_ID] + tokens)
            best = int(np.argmax(logits.data[-1]))
            if best == EOS_ID:
                break
            tokens.append(best)
    return TokenSequence(tokens)


# Losses -----------------------------------------------------------------------------------------


def ctc_required_length(target: TokenSequence) -> int:
    """ Minimum number of frames: one per token plus a blank between equal neighbours. """
    repeats = sum(1 for a, b in zip(target.tokens, target.tokens[1:]) if a == b)
    return len(target) + repeats


def _shift(values: np.ndarray, by: int) -> np.ndarray:
    """ values moved right by `by` positions (negative: left), filled with -inf. """
    out = np.full_like(values, -np.inf)
    if by > 0:
        out[by:] = values[:-by]
    elif by < 0:
        out[:by] = values[-by:]
    else:
        out[:] = values
    return out


def ctc_loss(enc_logits: Tensor, target: TokenSequence) -> Tensor:
    """
    Negative log probability of target summed over all CTC alignments (forward-backward in log space).

    :param enc_logits: T' x (n_tokens + 1) unnormalized scores, column 0 the blank
    :raises AlignmentError: if T' is smaller than the alignment needs
    """
    if enc_logits.ndim != 2:
        raise ShapeError(f'CTC expects T x V logits, got {enc_logits.shape}')
    frames, vocab = enc_logits.shape
    if frames == 0:
        raise ShapeError('CTC needs at least one frame')
    if max(target.tokens, default=0) >= vocab:
        raise ShapeError(f'Target {target.tokens} has ids outside a vocabulary of {vocab}')
    needed = ctc_required_length(target)
    if frames < needed:
        raise AlignmentError(f'Target needs {needed} frames, got {frames}')

    shifted = enc_logits.data - enc_logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    extended = np.full(2 * len(target) + 1, BLANK_ID, dtype=np.int64)
    extended[1::2] = target.tokens
    states = len(extended)
    skip = np.zeros(states, dtype=bool)
    skip[2:] = (extended[2:] != BLANK_ID) & (extended[2:] != extended[:-2])
    emissions = log_probs[:, extended]

    alpha = np.full((frames, states), -np.inf)
    alpha[0, :2] = emissions[0, :2]
    for t in range(1, frames):
        prev = alpha[t - 1]
        jump = np.where(skip, _shift(prev, 2), -np.inf)
        alpha[t] = emissions[t] + np.logaddexp(np.logaddexp(prev, _shift(prev, 1)), jump)

    skip_next = np.zeros(states, dtype=bool)
    skip_next[:-2] = skip[2:]
    beta = np.full((frames, states), -np.inf)
    beta[-1, -2:] = emissions[-1, -2:]
    for t in range(frames - 2, -1, -1):
        nxt = beta[t + 1]
        jump = np.where(skip_next, _shift(nxt, -2), -np.inf)
        beta[t] = emissions[t] + np.logaddexp(np.logaddexp(nxt, _shift(nxt, -1)), jump)

    log_likelihood = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if states > 1 else alpha[-1, -1]
    occupancy = np.exp(alpha + beta - emissions - log_likelihood)

    def backward_fn(g):
        expected = np.zeros((frames, vocab))
        np.add.at(expected, (slice(None), extended), occupancy)
        return (g * (np.exp(log_probs) - expected),)

    return tensor_from_op(np.array(-log_likelihood), (enc_logits,), backward_fn, 'ctc_loss')


def ctc_greedy_decode(enc_logits) -> TokenSequence:
    """ Frame-wise argmax, repeats collapsed, blanks dropped. """
    scores = enc_logits.data if isinstance(enc_logits, Tensor) else np.asarray(enc_logits)
    best = np.argmax(scores, axis=1)
    collapsed = [int(k) for i, k in enumerate(best) if i == 0 or k != best[i - 1]]
    return TokenSequence([k for k in collapsed if k != BLANK_ID])


def attention_loss(logits: Tensor, target: TokenSequence, smoothing: float = 0.1) -> Tensor:
    """
    Label-smoothed cross-entropy of decoder logits against target followed by the end symbol,
    averaged over positions. The smoothed distribution is (1 - eps) * onehot + eps / V.
    """
    expected = target.tokens + (EOS_ID,)
    if logits.shape[0] != len(expected):
        raise ShapeError(f'{logits.shape[0]} logit rows for {len(expected)} output positions')
    vocab = logits.shape[1]
    q = np.full((len(expected), vocab), smoothing / vocab)
    q[np.arange(len(expected)), expected] += 1.0 - smoothing
    return -(log_softmax(logits, axis=1) * Tensor(q)).sum(axis=1).mean()


def _check_permutation(permutation: Sequence[int], n: int) -> Tuple[int, ...]:
    permutation = tuple(int(p) for p in permutation)
    if sorted(permutation) != list(range(n)):
        raise PermutationError(f'{permutation} is not a permutation of {n} elements')
    return permutation


def best_permutation(costs: np.ndarray) -> Tuple[int, ...]:
    """ Permutation minimizing sum_i costs[i, perm[i]]; the lexicographically first minimum wins. """
    n = len(costs)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        cost = costs[np.arange(n), perm].sum()
        if cost < best_cost:
            best, best_cost = perm, cost
    return best


def pit_loss(
    enc_outputs: Sequence[Tensor],
    refs: Sequence[TokenSequence],
    ctc_head: Linear,
    decoder: Decoder,
    cfg: LossConfig = LossConfig(),
    permutation: Sequence[int] = None,
) -> PitResult:
    """
    Hybrid CTC/attention loss under the reference assignment that minimizes the CTC sum.

    :param enc_outputs: One T' x d_model encoder stream per speaker output
    :param refs: Reference sequences
    :param ctc_head: Shared projection from d_model to the CTC vocabulary
    :param decoder: Shared decoder
    :param cfg: Loss weights
    :param permutation: Use this assignment instead of searching
    :raises PermutationError: on mismatched counts or more than MAX_PIT_SPEAKERS speakers
    """
    n = len(enc_outputs)
    if n != len(refs):
        raise PermutationError(f'{n} speaker outputs for {len(refs)} references')
    if n > MAX_PIT_SPEAKERS:
        raise PermutationError(f'Permutation search supports at most {MAX_PIT_SPEAKERS} speakers, got {n}')
    ctc_logits = [ctc_head(enc) for enc in enc_outputs]
    pairs: List[List[Tensor]] = [[ctc_loss(logits, ref) for ref in refs] for logits in ctc_logits]
    per_pair = np.array([[loss.item() for loss in row] for row in pairs]).reshape(n, n)
    if permutation is None:
        permutation = best_permutation(per_pair)
    else:
        permutation = _check_permutation(permutation, n)

    total = Tensor(0.0)
    ctc_sum, att_sum = 0.0, 0.0
    for i, j in enumerate(permutation):
        ctc = pairs[i][j]
        att = attention_loss(decoder(enc_outputs[i], refs[j]), refs[j], cfg.smoothing)
        total = total + cfg.lam * ctc + (1.0 - cfg.lam) * att
        ctc_sum += ctc.item()
        att_sum += att.item()
    return PitResult(permutation, per_pair, total, ctc_sum, att_sum)
