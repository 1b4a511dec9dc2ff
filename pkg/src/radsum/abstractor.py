"""Sentence rewriter: pointer-generator with copy and coverage.

Rewrites one selected findings sentence into one impressions-style sentence.
Out-of-vocabulary source tokens are copyable through a per-example extended
vocabulary; accumulated attention (coverage) feeds back into the attention
energies and contributes a repetition penalty to the training loss.
Decoding is length-normalized beam search.
"""

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .nn import BiLSTMEncoder, ClippedAdam, init_uniform_, seed_everything

EPS = 1e-12


@dataclass(frozen=True)
class AbstractorConfig:
    vocab_size: int = 0
    emb_dim: int = 128
    hidden: int = 256
    coverage_weight: float = 1.0
    max_len: int = 30


def make_extended_ids(tokens, vocab):
    """Map tokens to vocab ids, assigning per-example extended ids to OOVs.

    Returns (ids, extended_ids, oov_list): `ids` uses UNK for OOVs (decoder
    input side), `extended_ids` uses vocab_size + k for the k-th distinct
    OOV (copy target side).
    """
    ids, ext_ids, oovs = [], [], []
    for tok in tokens:
        idx = vocab.stoi.get(tok)
        if idx is None:
            if tok not in oovs:
                oovs.append(tok)
            ids.append(vocab.unk)
            ext_ids.append(len(vocab) + oovs.index(tok))
        else:
            ids.append(idx)
            ext_ids.append(idx)
    return ids, ext_ids, oovs


def target_extended_ids(tokens, vocab, oovs):
    out = []
    for tok in tokens:
        idx = vocab.stoi.get(tok)
        if idx is None:
            out.append(len(vocab) + oovs.index(tok) if tok in oovs else vocab.unk)
        else:
            out.append(idx)
    return out


class AbstractorModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        h = config.hidden
        self.embedding = nn.Embedding(config.vocab_size, config.emb_dim)
        self.encoder = BiLSTMEncoder(config.emb_dim, h)
        self.init_proj = nn.Linear(2 * h, 2 * h)
        self.attn_src = nn.Linear(2 * h, h, bias=False)
        self.attn_dec = nn.Linear(h, h, bias=False)
        self.attn_cov = nn.Linear(1, h, bias=False)
        self.attn_v = nn.Parameter(torch.empty(h))
        self.cell = nn.LSTMCell(config.emb_dim + 2 * h, h)
        self.out_hidden = nn.Linear(3 * h, h)
        self.out_vocab = nn.Linear(h, config.vocab_size)
        self.p_gen = nn.Linear(3 * h + config.emb_dim, 1)
        init_uniform_(self)
        nn.init.uniform_(self.attn_v, -0.08, 0.08)

    def encode(self, src_ids):
        embs = self.embedding(src_ids)
        states = self.encoder(embs)
        h = self.config.hidden
        init = self.init_proj(states[-1])
        return states, (init[:h], init[h:])

    def pg_step(self, dec_state, y_id, context, enc_states, src_ext_ids,
                coverage, n_oov):
        """One decode step.

        Returns (extended-vocab distribution, new state, new context,
        attention, new coverage, p_gen). Coverage accumulates attention
        after the step; the caller reads min(attn, coverage-before) for the
        repetition loss.
        """
        y_emb = self.embedding(y_id)
        x = torch.cat([y_emb, context])
        hs, cs = self.cell(x.unsqueeze(0),
                           (dec_state[0].unsqueeze(0), dec_state[1].unsqueeze(0)))
        hs, cs = hs.squeeze(0), cs.squeeze(0)
        energy = torch.tanh(self.attn_src(enc_states) + self.attn_dec(hs)
                            + self.attn_cov(coverage.unsqueeze(1))) @ self.attn_v
        attn = torch.softmax(energy, dim=0)
        new_context = attn @ enc_states
        p_vocab = torch.softmax(
            self.out_vocab(torch.tanh(self.out_hidden(torch.cat([hs, new_context])))),
            dim=0)
        p_gen = torch.sigmoid(self.p_gen(torch.cat([new_context, hs, y_emb])))
        dist = torch.zeros(self.config.vocab_size + n_oov,
                           dtype=p_vocab.dtype, device=p_vocab.device)
        dist[:self.config.vocab_size] = p_gen * p_vocab
        dist = dist.index_add(0, src_ext_ids, (1.0 - p_gen) * attn)
        new_coverage = coverage + attn
        return dist, (hs, cs), new_context, attn, new_coverage, p_gen.squeeze(0)

    def nll_loss(self, src_tokens, tgt_tokens, vocab, components=False):
        """Teacher-forced NLL plus weighted coverage loss on one pair."""
        device = self.attn_v.device
        src_ids_l, src_ext_l, oovs = make_extended_ids(src_tokens, vocab)
        src_ids = torch.tensor(src_ids_l, dtype=torch.long, device=device)
        src_ext = torch.tensor(src_ext_l, dtype=torch.long, device=device)
        targets = target_extended_ids(tgt_tokens, vocab, oovs) + [vocab.end]
        enc_states, state = self.encode(src_ids)
        context = torch.zeros(2 * self.config.hidden, dtype=enc_states.dtype,
                              device=device)
        coverage = torch.zeros(len(src_tokens), dtype=enc_states.dtype, device=device)
        prev = vocab.start
        nll = enc_states.sum() * 0.0
        cov_loss = nll.clone()
        for tgt in targets:
            y_id = torch.tensor(prev if prev < len(vocab) else vocab.unk, device=device)
            dist, state, context, attn, new_cov, _ = self.pg_step(
                state, y_id, context, enc_states, src_ext, coverage, len(oovs))
            nll = nll - torch.log(dist[tgt] + EPS)
            cov_loss = cov_loss + torch.minimum(attn, coverage).sum()
            coverage = new_cov
            prev = tgt
        if components:
            return nll, cov_loss
        return nll + self.config.coverage_weight * cov_loss

    @torch.no_grad()
    def abstract_sentence(self, src_tokens, vocab, beam=5, max_len=None):
        """Length-normalized beam search; copied OOV ids resolve back to
        surface strings. Returns (tokens, total_logprob)."""
        if not src_tokens:
            return [], 0.0
        max_len = max_len or self.config.max_len
        device = self.attn_v.device
        src_ids_l, src_ext_l, oovs = make_extended_ids(src_tokens, vocab)
        src_ids = torch.tensor(src_ids_l, dtype=torch.long, device=device)
        src_ext = torch.tensor(src_ext_l, dtype=torch.long, device=device)
        enc_states, state = self.encode(src_ids)
        context = torch.zeros(2 * self.config.hidden, dtype=enc_states.dtype,
                              device=device)
        coverage = torch.zeros(len(src_tokens), dtype=enc_states.dtype, device=device)
        # hypothesis: (tokens, logp, state, context, coverage)
        live = [([], 0.0, state, context, coverage)]
        finished = []
        for _ in range(max_len):
            candidates = []
            for tokens, logp, state, context, coverage in live:
                prev = tokens[-1] if tokens else vocab.start
                y_id = torch.tensor(prev if prev < len(vocab) else vocab.unk,
                                    device=device)
                dist, new_state, new_context, _, new_cov, _ = self.pg_step(
                    state, y_id, context, enc_states, src_ext, coverage, len(oovs))
                logs = torch.log(dist + EPS)
                top = torch.topk(logs, min(beam, logs.shape[0]))
                for lp, idx in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((tokens + [idx], logp + lp,
                                       new_state, new_context, new_cov))
            candidates.sort(key=lambda c: (-c[1], c[0]))
            live = []
            for cand in candidates[: 2 * beam]:
                if cand[0][-1] == vocab.end:
                    finished.append((cand[0][:-1], cand[1]))
                elif len(live) < beam:
                    live.append(cand)
            if not live:
                break
        finished.extend((tokens, logp) for tokens, logp, *_ in live)
        if not finished:
            return [], 0.0
        best_tokens, best_logp = max(
            finished, key=lambda c: c[1] / max(len(c[0]) + 1, 1))
        surface = [vocab.token(i) if i < len(vocab) else oovs[i - len(vocab)]
                   for i in best_tokens]
        return surface, best_logp


@dataclass
class AbstractorTrainResult:
    history: list = field(default_factory=list)
    best_val_loss: float = 0.0
    init_val_loss: float = 0.0


def _pairs_loss(model, pairs, vocab):
    total, count = 0.0, 0
    with torch.no_grad():
        for src, tgt in pairs:
            total += float(model.nll_loss(src, tgt, vocab).item())
            count += len(tgt) + 1
    return total / max(count, 1)


def train_abstractor(model, train_pairs, val_pairs, vocab, lr=0.001,
                     clip_norm=1.5, epochs=10, batch_size=8, patience=2,
                     seed=0, log=None):
    """Teacher-forced training on matched sentence pairs with early stopping."""
    if not train_pairs:
        raise ValueError("no training pairs")
    seed_everything(seed)
    trainer = ClippedAdam(model.parameters(), lr=lr, clip_norm=clip_norm)
    init_val = _pairs_loss(model, val_pairs, vocab)
    best_val = init_val
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    result = AbstractorTrainResult(init_val_loss=init_val)
    since_best = 0
    for epoch in range(epochs):
        epoch_loss, epoch_tok = 0.0, 0
        batch_loss, batch_tok = None, 0
        for i, (src, tgt) in enumerate(train_pairs):
            loss = model.nll_loss(src, tgt, vocab)
            if not torch.isfinite(loss):
                raise FloatingPointError("non-finite abstractor loss")
            batch_loss = loss if batch_loss is None else batch_loss + loss
            batch_tok += len(tgt) + 1
            epoch_loss += float(loss.item())
            epoch_tok += len(tgt) + 1
            if (i + 1) % batch_size == 0 or i + 1 == len(train_pairs):
                (batch_loss / batch_tok).backward()
                trainer.step(model.named_parameters())
                batch_loss, batch_tok = None, 0
        val = _pairs_loss(model, val_pairs, vocab)
        result.history.append((epoch, epoch_loss / max(epoch_tok, 1), val))
        if log:
            log(f"abstractor epoch {epoch}: train "
                f"{epoch_loss / max(epoch_tok, 1):.4f} val {val:.4f}")
        if val < best_val - 1e-6:
            best_val = val
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    model.load_state_dict(best_state)
    result.best_val_loss = best_val
    return result


def matched_pairs(reports, labels_by_id=None, mode="f1"):
    """One (findings sentence, impressions sentence) pair per greedy match."""
    from .labels import greedy_match
    pairs = []
    for report in reports:
        if not report.findings or not report.impressions:
            continue
        match = greedy_match(report.findings, report.impressions, mode=mode)
        for imp_idx, f_idx in enumerate(match.indices):
            pairs.append((report.findings[f_idx], report.impressions[imp_idx]))
    return pairs
