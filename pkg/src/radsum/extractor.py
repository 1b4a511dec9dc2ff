"""Encoder plus dual pointer-network extractors with a switch gate.

One decoder points at findings words, the other at findings sentences; a
sigmoidal switch decides per step which level acts while the other pauses.
The sentence action space carries an extra END index that terminates
extraction. Pretraining is teacher-forced maximum likelihood on interleaved
labels; inference runs greedy or sampled decoding with no-reselection
masking at the sentence level.
"""

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .nn import (AdditiveAttention, BiLSTMEncoder, ClippedAdam,
                 ConvSentenceEncoder, init_uniform_, seed_everything)


@dataclass(frozen=True)
class ExtractorConfig:
    vocab_size: int = 0
    emb_dim: int = 128
    pos_dim: int = 128
    max_pos: int = 100
    hidden: int = 256
    conv_filters: int = 100
    conv_windows: tuple = (3, 4, 5)


@dataclass
class EncoderStates:
    word_states: torch.Tensor  # (m, 2h)
    sent_states: torch.Tensor  # (n, 2h)
    word_end: torch.Tensor  # (2h,)
    sent_end: torch.Tensor  # (2h,)
    sent_keys: torch.Tensor  # (n + 1, 2h), END key appended

    @property
    def n_words(self):
        return self.word_states.shape[0]

    @property
    def n_sentences(self):
        return self.sent_states.shape[0]


@dataclass
class StepOutput:
    word_energy: torch.Tensor  # (m,)
    sent_energy: torch.Tensor  # (n + 1,), masked entries -inf
    word_context: torch.Tensor
    sent_context: torch.Tensor
    switch_logit: torch.Tensor  # scalar; sigmoid = P(word step)

    @property
    def word_attn(self):
        return torch.softmax(self.word_energy, dim=0)

    @property
    def sent_attn(self):
        return torch.softmax(self.sent_energy, dim=0)

    @property
    def q(self):
        return torch.sigmoid(self.switch_logit)


@dataclass
class TraceStep:
    j: int
    level: str  # "w" or "s"
    index: int
    q: float


@dataclass
class ExtractionResult:
    sentences: list
    words: list
    trace: list = field(default_factory=list)
    truncated: bool = False


class ExtractorModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        h = config.hidden
        self.embedding = nn.Embedding(config.vocab_size, config.emb_dim)
        self.pos_embedding = nn.Embedding(config.max_pos, config.pos_dim)
        self.word_encoder = BiLSTMEncoder(config.emb_dim, h)
        self.conv = ConvSentenceEncoder(config.emb_dim + config.pos_dim,
                                        config.conv_filters, config.conv_windows)
        self.sent_encoder = BiLSTMEncoder(self.conv.output_dim, h)
        self.end_key = nn.Parameter(torch.empty(2 * h))
        self.word_attn = AdditiveAttention(h, 2 * h, h)
        self.sent_attn = AdditiveAttention(h, 2 * h, h)
        # decoder step input: [c_w, c_s, own selection rep, message scalar]
        step_in = 6 * h + 1
        self.word_cell = nn.LSTMCell(step_in, h)
        self.sent_cell = nn.LSTMCell(step_in, h)
        self.word_init = nn.Linear(2 * h, 2 * h)
        self.sent_init = nn.Linear(2 * h, 2 * h)
        self.switch = nn.Sequential(
            nn.Linear(6 * h, h), nn.Tanh(), nn.Linear(h, 1))
        init_uniform_(self.embedding)
        init_uniform_(self.pos_embedding)
        nn.init.uniform_(self.end_key, -0.08, 0.08)
        init_uniform_(self.word_cell)
        init_uniform_(self.sent_cell)
        init_uniform_(self.word_init)
        init_uniform_(self.sent_init)
        init_uniform_(self.switch)

    # -- encoding -----------------------------------------------------------

    def encode(self, report, vocab):
        """Run the full encoder stack over one report's findings."""
        if not report.findings or all(not s for s in report.findings):
            raise ValueError(f"report {report.id} has empty findings")
        device = self.end_key.device
        word_ids = torch.tensor([vocab.index(t) for t in report.flat_findings_tokens],
                                dtype=torch.long, device=device)
        word_embs = self.embedding(word_ids)
        word_states = self.word_encoder(word_embs)
        sent_vecs = []
        offset = 0
        for sent in report.findings:
            length = len(sent)
            embs = word_embs[offset:offset + length]
            pos_ids = torch.tensor(
                [min(i, self.config.max_pos - 1) for i in range(length)],
                dtype=torch.long, device=device)
            sent_vecs.append(self.conv(embs, self.pos_embedding(pos_ids)))
            offset += length
        sent_states = self.sent_encoder(torch.stack(sent_vecs))
        sent_keys = torch.cat([sent_states, self.end_key.unsqueeze(0)], dim=0)
        return EncoderStates(word_states=word_states, sent_states=sent_states,
                             word_end=word_states[-1], sent_end=sent_states[-1],
                             sent_keys=sent_keys)

    def initial_state(self, enc):
        h = self.config.hidden
        w = self.word_init(enc.word_end)
        s = self.sent_init(enc.sent_end)
        return (w[:h], w[h:]), (s[:h], s[h:])

    # -- one decode step ----------------------------------------------------

    def compute_step(self, word_state, sent_state, enc, sent_mask=None):
        hw, hs = word_state[0], sent_state[0]
        we = torch.tanh(self.word_attn.wq(hw) + self.word_attn.wk(enc.word_states)) \
            @ self.word_attn.v
        se = torch.tanh(self.sent_attn.wq(hs) + self.sent_attn.wk(enc.sent_keys)) \
            @ self.sent_attn.v
        if sent_mask is not None:
            se = se.masked_fill(sent_mask, float("-inf"))
        c_w = torch.softmax(we, dim=0) @ enc.word_states
        c_s = torch.softmax(se, dim=0) @ enc.sent_keys
        logit = self.switch(torch.cat([hw, c_w, hs, c_s])).squeeze(0)
        return StepOutput(word_energy=we, sent_energy=se,
                          word_context=c_w, sent_context=c_s, switch_logit=logit)

    def advance(self, word_state, sent_state, step_out, word_sel, sent_sel, message):
        """Advance both decoder LSTMs one step.

        `word_sel` / `sent_sel` are the selected-item encoder representations
        (the level's end representation when it paused); `message` is the
        scalar probability of a word step, fed as 1 - message to the word
        decoder and as message to the sentence decoder.
        """
        c = torch.cat([step_out.word_context, step_out.sent_context])
        word_in = torch.cat([c, word_sel, (1.0 - message).reshape(1)])
        sent_in = torch.cat([c, sent_sel, message.reshape(1)])
        new_word = self.word_cell(word_in.unsqueeze(0),
                                  (word_state[0].unsqueeze(0), word_state[1].unsqueeze(0)))
        new_sent = self.sent_cell(sent_in.unsqueeze(0),
                                  (sent_state[0].unsqueeze(0), sent_state[1].unsqueeze(0)))
        return ((new_word[0].squeeze(0), new_word[1].squeeze(0)),
                (new_sent[0].squeeze(0), new_sent[1].squeeze(0)))

    # -- losses -------------------------------------------------------------

    def mle_loss(self, report, labels, vocab, components=False):
        """Teacher-forced loss over one report's interleaved labels.

        Word and sentence cross-entropies fire on their own steps; the
        switch binary cross-entropy fires at every step including END.
        """
        enc = self.encode(report, vocab)
        n = enc.n_sentences
        if labels.end_index != n:
            raise ValueError(f"labels for {report.id} disagree with sentence count")
        word_state, sent_state = self.initial_state(enc)
        mask = torch.zeros(n + 1, dtype=torch.bool, device=enc.sent_keys.device)
        zero = enc.word_end.sum() * 0.0
        loss_w, loss_s, loss_q = zero.clone(), zero.clone(), zero.clone()
        for j, step in enumerate(labels.steps):
            out = self.compute_step(word_state, sent_state, enc, mask)
            target_q = torch.tensor(float(step.switch), dtype=out.switch_logit.dtype,
                                    device=out.switch_logit.device)
            loss_q = loss_q + F.binary_cross_entropy_with_logits(out.switch_logit, target_q)
            if step.switch == 1:
                if step.word is None or not 0 <= step.word < enc.n_words:
                    raise ValueError(f"bad word label at step {j} for {report.id}")
                loss_w = loss_w - F.log_softmax(out.word_energy, dim=0)[step.word]
                word_sel, sent_sel = enc.word_states[step.word], enc.sent_end
            else:
                if step.sentence is None or not 0 <= step.sentence <= n:
                    raise ValueError(f"bad sentence label at step {j} for {report.id}")
                loss_s = loss_s - F.log_softmax(out.sent_energy, dim=0)[step.sentence]
                word_sel = enc.word_end
                sent_sel = enc.sent_keys[step.sentence]
                if step.sentence < n:
                    mask = mask.clone()
                    mask[step.sentence] = True
            if j + 1 < len(labels.steps):
                word_state, sent_state = self.advance(
                    word_state, sent_state, out, word_sel, sent_sel, out.q)
        if components:
            return loss_w, loss_s, loss_q
        return loss_w + loss_s + loss_q

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def extract(self, report, vocab, mode="greedy", max_steps=64, generator=None):
        """Decode selections until the sentence extractor picks END."""
        enc = self.encode(report, vocab)
        n = enc.n_sentences
        word_state, sent_state = self.initial_state(enc)
        mask = torch.zeros(n + 1, dtype=torch.bool, device=enc.sent_keys.device)
        result = ExtractionResult(sentences=[], words=[])
        for j in range(max_steps):
            out = self.compute_step(word_state, sent_state, enc, mask)
            q = out.q
            if mode == "greedy":
                take_word = bool(q.item() >= 0.5)
            elif mode == "sample":
                take_word = bool(torch.bernoulli(q, generator=generator).item())
            else:
                raise ValueError(f"unknown mode {mode!r}")
            if take_word:
                if mode == "greedy":
                    idx = int(out.word_attn.argmax().item())
                else:
                    idx = int(torch.multinomial(out.word_attn, 1,
                                                generator=generator).item())
                result.words.append(idx)
                result.trace.append(TraceStep(j, "w", idx, float(q.item())))
                word_sel, sent_sel = enc.word_states[idx], enc.sent_end
            else:
                if mode == "greedy":
                    idx = int(out.sent_attn.argmax().item())
                else:
                    idx = int(torch.multinomial(out.sent_attn, 1,
                                                generator=generator).item())
                result.trace.append(TraceStep(j, "s", idx, float(q.item())))
                if idx == n:
                    return result
                result.sentences.append(idx)
                mask[idx] = True
                word_sel, sent_sel = enc.word_end, enc.sent_keys[idx]
            word_state, sent_state = self.advance(
                word_state, sent_state, out, word_sel, sent_sel, q)
        result.truncated = True
        return result


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainResult:
    history: list  # (epoch, train_loss, val_loss)
    best_val_loss: float
    init_val_loss: float


def _corpus_loss(model, reports, labels_by_id, vocab):
    total, count = 0.0, 0
    with torch.no_grad():
        for report in reports:
            total += float(model.mle_loss(report, labels_by_id[report.id], vocab).item())
            count += len(labels_by_id[report.id])
    return total / max(count, 1)


def train_extractor_mle(model, train_reports, val_reports, labels_by_id, vocab,
                        lr=0.001, clip_norm=1.5, epochs=30, batch_size=8,
                        patience=3, seed=0, log=None):
    """Mini-batched MLE training with early stopping on validation loss.

    Returns a TrainResult; the model is left holding the best-validation
    parameters.
    """
    seed_everything(seed)
    trainer = ClippedAdam(model.parameters(), lr=lr, clip_norm=clip_norm)
    init_val = _corpus_loss(model, val_reports, labels_by_id, vocab)
    best_val = init_val
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    history = []
    since_best = 0
    for epoch in range(epochs):
        epoch_loss, epoch_steps = 0.0, 0
        batch_loss, batch_steps = None, 0
        for i, report in enumerate(train_reports):
            loss = model.mle_loss(report, labels_by_id[report.id], vocab)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss on report {report.id}")
            batch_loss = loss if batch_loss is None else batch_loss + loss
            batch_steps += len(labels_by_id[report.id])
            epoch_loss += float(loss.item())
            epoch_steps += len(labels_by_id[report.id])
            if (i + 1) % batch_size == 0 or i + 1 == len(train_reports):
                (batch_loss / batch_steps).backward()
                trainer.step(model.named_parameters())
                batch_loss, batch_steps = None, 0
        val = _corpus_loss(model, val_reports, labels_by_id, vocab)
        history.append((epoch, epoch_loss / max(epoch_steps, 1), val))
        if log:
            log(f"epoch {epoch}: train {epoch_loss / max(epoch_steps, 1):.4f} "
                f"val {val:.4f}")
        if val < best_val - 1e-6:
            best_val = val
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    model.load_state_dict(best_state)
    return TrainResult(history=history, best_val_loss=best_val, init_val_loss=init_val)
