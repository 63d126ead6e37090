"""Generative baseline: encoder-decoder over item-ID tokens with beam search.

A miniature of the ID-indexed generative recommender pipeline. Items are
written as ``item _ 12 34`` token strings, the encoder reads the history's
tokens and the decoder generates the next item's tokens one at a time.
``TokenRecommender`` keeps a token encoder but swaps decoding for a
projection head; it backs the decoder-free variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .head import ProjectionHead
from .nn import DecoderLayer, Dropout, Embedding, EncoderStack, LayerNorm, Linear, Module
from .tensor import Tensor
from .text import BOS, EOS, PAD, UNK, encode_item_id_tokens

RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")


@dataclass
class GenConfig:
    vocab_size: int = 4096
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ff_dim: int = 256
    max_input_len: int = 96
    max_target_len: int = 8
    dropout: float = 0.1
    id_offset: int = 1000
    beam_width: int = 20
    length_penalty: float = 0.0


class GenVocab:
    """Item-ID token inventory, padded with filler tokens to ``size``.

    Item ``i`` is written as the ID string of ``i + id_offset``; the default
    offset keeps every ID for catalogs under 9,000 items at four tokens.
    """

    def __init__(self, size: int = 4096, id_offset: int = 1000):
        core = list(RESERVED) + ["item", "_"] + [str(d) for d in range(10)] + [f"{d:02d}" for d in range(100)]
        if size < len(core):
            raise ValueError(f"vocabulary size must be at least {len(core)}")
        self.id_offset = id_offset
        self.num_item_tokens = len(core) - len(RESERVED)
        self._itos = core + [f"<filler{i}>" for i in range(size - len(core))]
        self._stoi = {t: i for i, t in enumerate(self._itos)}

    def __len__(self) -> int:
        return len(self._itos)

    @property
    def item_token_fraction(self) -> float:
        return self.num_item_tokens / len(self)

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def item_tokens(self, item_index: int) -> list[int]:
        return [self._stoi[t] for t in encode_item_id_tokens(item_index + self.id_offset)]

    def parse(self, ids: Sequence[int]) -> int | None:
        """Inverse of :meth:`item_tokens`; None for anything malformed."""
        toks = [self._itos[i] for i in ids if i not in (EOS, PAD)]
        if len(toks) < 3 or toks[0] != "item" or toks[1] != "_":
            return None
        pieces = toks[2:]
        if not all(p.isdigit() for p in pieces):
            return None
        # only the canonical grouping round-trips
        head_ok = len(pieces[0]) in (1, 2) and all(len(p) == 2 for p in pieces[1:])
        digits = "".join(pieces)
        if not head_ok or (len(digits) > 1 and digits[0] == "0"):
            return None
        if encode_item_id_tokens(int(digits)) != toks:
            return None
        return int(digits) - self.id_offset


# ---------------------------------------------------------------------------
# models


class Seq2Seq(Module):
    def __init__(self, config: GenConfig, seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        rng, d = self.rng, config.model_dim
        self.enc_tok = Embedding(config.vocab_size, d, rng)
        self.enc_pos = Embedding(config.max_input_len, d, rng)
        self.encoder = EncoderStack(config.layers, d, config.heads, config.ff_dim, config.dropout, rng)
        self.dec_tok = Embedding(config.vocab_size, d, rng)
        self.dec_pos = Embedding(config.max_target_len + 1, d, rng)
        self.dec_layers = [DecoderLayer(d, config.heads, config.ff_dim, config.dropout, rng) for _ in range(config.layers)]
        self.dec_ln = LayerNorm(d)
        self.lm_head = Linear(d, config.vocab_size, rng, bias=False)
        self.drop = Dropout(config.dropout, rng)
        self.decoder_calls = 0
        self.decoder_positions = 0

    def encode(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.shape[1] > self.config.max_input_len:
            raise ContractError(f"input of {ids.shape[1]} tokens exceeds max_input_len={self.config.max_input_len}")
        x = self.enc_tok(ids) + T.take_rows(self.enc_pos.weight, np.arange(ids.shape[1]))
        return self.encoder(self.drop(x), key_mask=mask)

    def cross_kv(self, memory: Tensor, repeat: int = 1) -> list[tuple[Tensor, Tensor]]:
        """Cross-attention keys/values per decoder layer, each row repeated
        ``repeat`` times so one encoding serves every beam of a query."""
        out = []
        for layer in self.dec_layers:
            k, v = layer.cross_attn.project_kv(memory)
            if repeat > 1:
                k, v = T.Tensor(np.repeat(k.data, repeat, axis=0)), T.Tensor(np.repeat(v.data, repeat, axis=0))
            out.append((k, v))
        return out

    def decode(
        self, memory: Tensor | None, memory_mask: np.ndarray, prefix: np.ndarray, last_only: bool = False, cross_kv=None
    ) -> Tensor:
        """Logits for every position of ``prefix`` (B, P) -> (B, P, V), or
        only for the final position (B, V) when ``last_only``."""
        prefix = np.asarray(prefix)
        p = prefix.shape[1]
        if p > self.config.max_target_len + 1:
            raise ContractError(f"decoder prefix of {p} tokens exceeds max_target_len")
        self.decoder_calls += 1
        self.decoder_positions += prefix.size
        x = self.drop(self.dec_tok(prefix) + T.take_rows(self.dec_pos.weight, np.arange(p)))
        for i, layer in enumerate(self.dec_layers):
            kv = cross_kv[i] if cross_kv is not None else None
            x = layer(x, memory, memory_mask, self_mask=prefix != PAD, cross_kv=kv)
        if last_only:
            x = T.take_rows(x.reshape(-1, x.shape[-1]), np.arange(1, x.shape[0] + 1) * p - 1)
        return self.lm_head(self.dec_ln(x))

    def decode_step(self, tokens: np.ndarray, position: int, memory_mask: np.ndarray, cross_kv, past=None):
        """Next-token logits (N, V) after appending ``tokens`` at ``position``.

        ``past`` is the per-layer self-attention cache returned by the previous
        step (None at the BOS position); the updated cache is returned with the
        logits so a caller can reorder its rows between steps.
        """
        if position > self.config.max_target_len:
            raise ContractError(f"decoder position {position} exceeds max_target_len")
        tokens = np.asarray(tokens).reshape(-1, 1)
        self.decoder_calls += 1
        self.decoder_positions += tokens.shape[0]
        x = self.drop(self.dec_tok(tokens) + T.take_rows(self.dec_pos.weight, np.array([position])))
        present = []
        for i, layer in enumerate(self.dec_layers):
            x, kv = layer.step(x, memory_mask, cross_kv[i], None if past is None else past[i])
            present.append(kv)
        return self.lm_head(self.dec_ln(x)).reshape(tokens.shape[0], -1), present

    def forward(self, ids, mask, prefix) -> Tensor:
        return self.decode(self.encode(ids, mask), mask, prefix)

    def loss(self, ids, mask, target_tokens: np.ndarray) -> Tensor:
        """Teacher-forced next-token cross-entropy over the target ID tokens."""
        tgt = np.asarray(target_tokens)
        col = np.full((tgt.shape[0], 1), PAD)
        prefix = np.concatenate([col + BOS, tgt], axis=1)
        labels = np.concatenate([tgt, col], axis=1)
        labels[np.arange(tgt.shape[0]), (tgt != PAD).sum(axis=1)] = EOS
        logits = self(ids, mask, prefix)
        v = logits.shape[-1]
        flat = logits.reshape(-1, v)
        rows = np.flatnonzero(labels.reshape(-1) != PAD)
        return T.cross_entropy_logits(T.take_rows(flat, rows), labels.reshape(-1)[rows])


def seq2seq_forward(model: Seq2Seq, ids, mask, prefix) -> np.ndarray:
    """Next-token logits (B, V) after ``prefix``."""
    return model.decode(model.encode(ids, mask), mask, prefix, last_only=True).data


class TokenRecommender(Module):
    """Token-sequence encoder + mean pool + bias-free item head (no decoder)."""

    def __init__(self, vocab_size: int, num_items: int, config: GenConfig, max_input_len: int, seed: int = 0):
        self.config = config
        self.max_input_len = max_input_len
        self.rng = np.random.default_rng(seed)
        rng, d = self.rng, config.model_dim
        self.tok = Embedding(vocab_size, d, rng)
        self.pos = Embedding(max_input_len, d, rng)
        self.encoder = EncoderStack(config.layers, d, config.heads, config.ff_dim, config.dropout, rng)
        self.head = ProjectionHead(num_items, d, rng)
        self.drop = Dropout(config.dropout, rng)
        self.decoder_calls = 0

    def encode(self, ids, mask) -> Tensor:
        ids = np.asarray(ids)
        if ids.shape[1] > self.max_input_len:
            raise ContractError(f"input of {ids.shape[1]} tokens exceeds max_input_len={self.max_input_len}")
        x = self.tok(ids) + T.take_rows(self.pos.weight, np.arange(ids.shape[1]))
        return T.mean_pool_masked(self.encoder(self.drop(x), key_mask=mask), mask)

    def forward(self, ids, mask) -> Tensor:
        return self.head(self.encode(ids, mask))


# ---------------------------------------------------------------------------
# token inputs


def pack_tokens(seqs: Sequence[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token lists, keeping the most recent ``max_len`` tokens."""
    seqs = [list(s)[-max_len:] for s in seqs]
    width = max(1, max(len(s) for s in seqs))
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
    return ids, ids != PAD


def id_token_inputs(histories: Sequence[Sequence[int]], vocab: GenVocab, max_len: int):
    return pack_tokens([[t for i in h for t in vocab.item_tokens(i)] for h in histories], max_len)


def title_token_inputs(histories: Sequence[Sequence[int]], item_tokens, max_len: int):
    rows = [[t for i in h for t in item_tokens.ids[i][item_tokens.mask[i]].tolist()] for h in histories]
    return pack_tokens(rows, max_len)


def target_token_matrix(items: Sequence[int], vocab: GenVocab) -> np.ndarray:
    return pack_tokens([vocab.item_tokens(i) for i in items], 10**6)[0]


# ---------------------------------------------------------------------------
# decoding


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    finished: bool = False


def _normalized(score: float, length: int, alpha: float) -> float:
    return score if alpha == 0.0 else score / (max(length, 1) ** alpha)


@dataclass
class _UserBeams:
    live: list[Hypothesis]
    finished: list[Hypothesis] = field(default_factory=list)
    done: bool = False


def beam_search_decode(
    model: Seq2Seq,
    ids: np.ndarray,
    mask: np.ndarray,
    beam_width: int,
    max_steps: int,
    num_return: int,
    length_penalty: float = 0.0,
    allowed: Callable[[tuple[int, ...]], Sequence[int]] | None = None,
    memory: Tensor | None = None,
) -> list[list[Hypothesis]]:
    """Batched beam search, one result list per input row.

    Each step scores every live beam's extensions; an EOS candidate that ranks
    inside the top ``beam_width`` becomes a finished hypothesis, other
    candidates refill the live beams. A query stops once it holds
    ``num_return`` finished hypotheses that no live beam can overtake.
    ``allowed`` optionally restricts the next token given the generated prefix.
    ``memory`` lets a caller pass an encoding it already computed.
    """
    if not 1 <= num_return <= beam_width:
        raise ContractError("need beam_width >= num_return >= 1")
    was_training = model.training
    model.eval()
    try:
        return _beam_search(model, ids, mask, beam_width, max_steps, num_return, length_penalty, allowed, memory)
    finally:
        model.train(was_training)


def _beam_search(model, ids, mask, beam_width, max_steps, num_return, length_penalty, allowed, memory):
    if memory is None:
        memory = model.encode(ids, mask)
    n_users = memory.shape[0]
    B = beam_width
    cross_kv = model.cross_kv(memory, B)
    mem_mask = np.repeat(np.asarray(mask, dtype=bool), B, axis=0)
    users = [_UserBeams([Hypothesis((), 0.0)]) for _ in range(n_users)]
    blocked = np.array([PAD, BOS, UNK])
    alpha = length_penalty

    # one new token per beam row per step; self-attention keys/values are cached
    tokens = np.full(n_users * B, BOS, dtype=np.int64)
    past = None
    for step in range(max_steps):
        if all(u.done for u in users):
            break
        base = np.full((n_users, B), -np.inf)
        for u, ub in enumerate(users):
            if ub.done:
                continue
            for j, h in enumerate(ub.live):
                base[u, j] = h.score
        logits, past = model.decode_step(tokens, step, mem_mask, cross_kv, past)
        logits = logits.data
        logp = T.log_softmax_rows(T.Tensor(logits)).data
        logp[:, blocked] = -np.inf
        v = logp.shape[1]
        if allowed is not None:
            for u, ub in enumerate(users):
                if ub.done:
                    continue
                for j, h in enumerate(ub.live):
                    keep = np.fromiter(allowed(h.tokens), dtype=np.int64)
                    row = np.full(v, -np.inf)
                    row[keep] = logp[u * B + j, keep]
                    logp[u * B + j] = row
        cand = (base[:, :, None] + logp.reshape(n_users, B, v)).reshape(n_users, B * v)
        take = min(2 * B, B * v)
        src = np.arange(n_users * B)
        tokens = np.full(n_users * B, PAD, dtype=np.int64)
        for u, ub in enumerate(users):
            if ub.done:
                continue
            row = cand[u]
            top = np.argpartition(-row, take - 1)[:take]
            top = top[np.lexsort((top, -row[top]))]
            live: list[Hypothesis] = []
            parents: list[int] = []
            for rank, flat in enumerate(top):
                score = row[flat]
                if not np.isfinite(score):
                    break
                j, tok = divmod(int(flat), v)
                toks = ub.live[j].tokens + (tok,)
                if tok == EOS:
                    if rank < B:
                        ub.finished.append(Hypothesis(toks, float(_normalized(score, len(toks), alpha)), True))
                elif len(live) < B:
                    live.append(Hypothesis(toks, float(score)))
                    parents.append(j)
                if len(live) >= B and rank >= B - 1:
                    break
            ub.live = live
            if len(ub.finished) >= num_return:
                ub.finished.sort(key=lambda h: (-h.score, h.tokens))
                kth = ub.finished[num_return - 1].score
                best_live = max((_normalized(h.score, len(h.tokens), alpha) for h in live), default=-np.inf)
                if best_live < kth:
                    ub.done = True
            if not live:
                ub.done = True
            for j, (h, parent) in enumerate(zip(live, parents)):
                src[u * B + j] = u * B + parent
                tokens[u * B + j] = h.tokens[-1]
        past = [(T.Tensor(k.data[src]), T.Tensor(v.data[src])) for k, v in past]

    results = []
    for ub in users:
        fin = sorted(ub.finished, key=lambda h: (-h.score, h.tokens))
        if len(fin) < num_return:
            rest = sorted(ub.live, key=lambda h: (-h.score, h.tokens))
            fin = fin + rest[: num_return - len(fin)]
        results.append(fin[:num_return])
    return results


def greedy_decode(model: Seq2Seq, ids: np.ndarray, mask: np.ndarray, max_steps: int) -> list[Hypothesis]:
    """Arg-max decoding, stopping each row at EOS."""
    was_training = model.training
    model.eval()
    try:
        mem = model.encode(ids, mask)
        n = mem.shape[0]
        cross_kv = model.cross_kv(mem)
        toks: list[tuple[int, ...]] = [()] * n
        scores = np.zeros(n)
        live = np.ones(n, dtype=bool)
        tokens = np.full(n, BOS, dtype=np.int64)
        past = None
        for step in range(max_steps):
            if not live.any():
                break
            logits, past = model.decode_step(tokens, step, np.asarray(mask, dtype=bool), cross_kv, past)
            logits = logits.data.astype(np.float64)
            logp = T.log_softmax_rows(T.Tensor(logits)).data
            logp[:, [PAD, BOS, UNK]] = -np.inf
            for r in np.flatnonzero(live):
                tok = int(np.argmax(logp[r]))
                toks[r] += (tok,)
                tokens[r] = tok
                scores[r] += logp[r, tok]
                live[r] = tok != EOS
    finally:
        model.train(was_training)
    return [Hypothesis(t, float(s), bool(t) and t[-1] == EOS) for t, s in zip(toks, scores)]


def item_trie(vocab: GenVocab, num_items: int) -> Callable[[tuple[int, ...]], list[int]]:
    """Prefix constraint that only admits valid catalog item IDs."""
    children: dict[tuple[int, ...], set[int]] = {}
    for i in range(num_items):
        toks = tuple(vocab.item_tokens(i)) + (EOS,)
        for k in range(len(toks)):
            children.setdefault(toks[:k], set()).add(toks[k])
    frozen = {k: sorted(v) for k, v in children.items()}
    return lambda prefix: frozen.get(tuple(prefix), [])


@dataclass
class ParsedItems:
    items: list[int]
    invalid: int = 0
    duplicates: int = 0


def parse_generated_items(sequences: Sequence[Sequence[int]], vocab: GenVocab, num_items: int) -> ParsedItems:
    """Ranked item indices from generated token sequences.

    Unparseable or out-of-catalog sequences count as invalid; repeats of an
    already-listed item count as duplicates. Neither raises.
    """
    out = ParsedItems([])
    seen: set[int] = set()
    for seq in sequences:
        item = vocab.parse(list(seq))
        if item is None or not 0 <= item < num_items:
            out.invalid += 1
        elif item in seen:
            out.duplicates += 1
        else:
            seen.add(item)
            out.items.append(item)
    return out


# ---------------------------------------------------------------------------
# evaluation adapters, training wiring and the variant runner


class BeamRanker:
    """Ranked recommendations read off the beams of the generative model."""

    def __init__(self, model: Seq2Seq, vocab: GenVocab, num_items: int, beam_width: int = 20,
                 max_steps: int | None = None, constrained: bool = True, batch_size: int = 32):
        self.model, self.vocab, self.num_items = model, vocab, num_items
        self.beam_width = beam_width
        self.max_steps = max_steps or len(vocab.item_tokens(num_items - 1)) + 1
        self.allowed = item_trie(vocab, num_items) if constrained else None
        self.batch_size = batch_size
        self.invalid = 0
        self.duplicates = 0

    def recommend(self, histories, k: int, exclude=None) -> list[list[int]]:
        k = min(k, self.beam_width)
        out = []
        for lo in range(0, len(histories), self.batch_size):
            chunk = histories[lo:lo + self.batch_size]
            ids, mask = id_token_inputs(chunk, self.vocab, self.model.config.max_input_len)
            beams = beam_search_decode(self.model, ids, mask, self.beam_width, self.max_steps, k,
                                       self.model.config.length_penalty, self.allowed)
            for r, row in enumerate(beams):
                parsed = parse_generated_items([h.tokens for h in row], self.vocab, self.num_items)
                self.invalid += parsed.invalid
                self.duplicates += parsed.duplicates
                seen = exclude[lo + r] if exclude is not None else set()
                out.append([i for i in parsed.items if i not in seen])
        return out


class TokenScorer:
    def __init__(self, model: TokenRecommender, to_tokens: Callable):
        self.model, self.to_tokens = model, to_tokens

    def score_histories(self, histories) -> np.ndarray:
        was = self.model.training
        self.model.eval()
        try:
            return self.model(*self.to_tokens(histories)).data
        finally:
            self.model.train(was)


def id_tokenizer(vocab: GenVocab, max_len: int, window: int = 20) -> Callable:
    return lambda hs: id_token_inputs([list(h)[-window:] for h in hs], vocab, max_len)


def title_tokenizer(item_tokens, max_len: int, window: int = 20) -> Callable:
    return lambda hs: title_token_inputs([list(h)[-window:] for h in hs], item_tokens, max_len)


def seq2seq_trainer(model: Seq2Seq, split, vocab: GenVocab, config, num_items: int,
                    val_users: int | None = 256, val_beam: int = 10, log=None):
    """Next-token CE on the target item's ID tokens, same segments as the hierarchical model."""
    from .evaluation import evaluate_full
    from .training import Trainer, lite_examples

    window = config.max_seq_len - 1
    to_tokens = id_tokenizer(vocab, model.config.max_input_len, window)

    def batch_loss(chunk):
        ids, mask = to_tokens([e.inputs for e in chunk])
        return model.loss(ids, mask, target_token_matrix([e.target for e in chunk], vocab))

    ranker = BeamRanker(model, vocab, num_items, beam_width=val_beam)
    users = None if val_users is None else list(range(min(val_users, len(split))))

    def val() -> float:
        return evaluate_full(ranker, split, ks=(10,), stage="valid", users=users)["R@10"]

    n_users = sum(len(t) >= 2 for t in split.train)
    per = -(-n_users // config.batch_size) if config.strategy == "sampling" else None
    return Trainer(model, config, lite_examples(split, config), batch_loss, val if config.validate else None, per, log)


def token_trainer(model: TokenRecommender, split, to_tokens: Callable, config, log=None):
    """Full-softmax CE through the projection head, as for the hierarchical model."""
    from .evaluation import evaluate_full
    from .training import Trainer, compute_loss, lite_examples

    def batch_loss(chunk):
        ids, mask = to_tokens([e.inputs for e in chunk])
        return compute_loss(model(ids, mask), np.array([e.target for e in chunk]))

    scorer = TokenScorer(model, to_tokens)

    def val() -> float:
        return evaluate_full(scorer, split, ks=(10,), stage="valid")["R@10"]

    n_users = sum(len(t) >= 2 for t in split.train)
    per = -(-n_users // config.batch_size) if config.strategy == "sampling" else None
    return Trainer(model, config, lite_examples(split, config), batch_loss, val if config.validate else None, per, log)


VARIANTS = ("full_beam", "wo_d", "wo_d_tid")


def run_baseline_variant(
    variant: str,
    model,
    split,
    num_items: int,
    vocab: GenVocab | None = None,
    item_tokens=None,
    ks=(10, 20),
    beam_width: int = 20,
    bench_batches: int = 10,
    warmup: int = 3,
    reps: int = 1,
    window: int = 20,
):
    """Evaluate one baseline variant and time its inference path.

    ``full_beam`` needs a :class:`Seq2Seq` and ``vocab``; ``wo_d`` a
    :class:`TokenRecommender` over ID tokens plus ``vocab``; ``wo_d_tid`` a
    :class:`TokenRecommender` over title tokens plus ``item_tokens``.
    """
    from .bench import BeamPipeline, TokenHeadPipeline, history_batches, time_components
    from .evaluation import evaluate_full

    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if model is None:
        raise ContractError(f"no trained model for variant {variant!r} (train it or pass a checkpoint)")
    hists = [split.history(p, "test") for p in range(len(split))]
    batches = history_batches(hists, 32, bench_batches + warmup)
    if variant == "full_beam":
        rec = BeamRanker(model, vocab, num_items, beam_width=beam_width)
        pipe = BeamPipeline(model, vocab, num_items, beam_width=beam_width, k=max(ks), name=variant)
    else:
        tok = id_tokenizer(vocab, model.max_input_len, window) if variant == "wo_d" else \
            title_tokenizer(item_tokens, model.max_input_len, window)
        rec = TokenScorer(model, tok)
        pipe = TokenHeadPipeline(model, tok, k=max(ks), name=variant)
    report = evaluate_full(rec, split, ks=ks)
    if variant == "full_beam":
        report.extra.update(invalid=rec.invalid, duplicates=rec.duplicates)
    timing = time_components(pipe, batches, warmup=warmup, reps=reps)
    return report, timing
