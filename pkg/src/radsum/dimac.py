"""Differentiable multi-agent actor-critic fine-tuning of the extractors.

The two pretrained pointer decoders act as independent agents; the switch
network becomes a communicator whose sigmoidal message enters both agents'
step inputs, so its gradient flows between them. A label-conditioned LSTM
critic supplies a per-step value baseline. The frozen abstractor is part of
the environment: sentence rewards score its rewrite of the selected sentence
against the next ground-truth impressions sentence, word rewards score
keyword hits under a monotone cursor, and a terminal global reward mixes
summary-level and keyword-level unigram recall.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .nn import AdditiveAttention, ClippedAdam, init_uniform_
from .rouge import r1_recall


@dataclass
class TrajectoryStep:
    j: int
    level: str  # "w" or "s"
    action: int
    message: float  # communicator output, P(word step)
    log_prob: torch.Tensor  # graph-carrying log pi of the taken action
    reward: float = 0.0
    abstracted: list = None  # decoded sentence for sentence steps


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    ended: bool = False  # sentence agent selected END
    truncated: bool = False
    global_reward: float = 0.0

    def __len__(self):
        return len(self.steps)

    def reward_streams(self):
        """Per-agent reward lists over all steps; paused steps contribute 0
        and the global reward sits at the last step of both."""
        word = [s.reward if s.level == "w" else 0.0 for s in self.steps]
        sent = [s.reward if s.level == "s" else 0.0 for s in self.steps]
        if self.steps:
            word[-1] += self.global_reward
            sent[-1] += self.global_reward
        return word, sent


@dataclass
class ReturnsTable:
    word_returns: list
    sent_returns: list

    def active_return(self, step):
        return (self.word_returns if step.level == "w" else self.sent_returns)[step.j]


# ---------------------------------------------------------------------------
# Rewards

def sentence_reward(abstracted, impressions, cursor):
    """Unigram recall of the abstracted sentence against the impressions
    sentence at the cursor; selections beyond the impressions earn 0."""
    if cursor >= len(impressions):
        return 0.0, cursor + 1
    return r1_recall(abstracted, impressions[cursor]), cursor + 1


def word_reward(selected_index, keyword_indices, cursor):
    """Monotone sequential keyword matching: 1 iff the selected flat word
    index occurs in the keyword list at or after the cursor."""
    for pos in range(cursor, len(keyword_indices)):
        if keyword_indices[pos] == selected_index:
            return 1, pos + 1
    return 0, cursor


def global_reward(abstracted_sentences, selected_word_tokens, impressions,
                  keyword_tokens, lam=0.1):
    """Terminal reward: summary-level R1 recall plus lambda-weighted keyword
    R1 recall."""
    summary = [tok for sent in abstracted_sentences for tok in sent]
    flat_impressions = [tok for sent in impressions for tok in sent]
    score = r1_recall(summary, flat_impressions)
    if keyword_tokens:
        score += lam * r1_recall(selected_word_tokens, keyword_tokens)
    return score


def returns_and_q(trajectory, gamma):
    """Discounted backward returns per agent; the single-sample return is
    the per-step action-value estimate."""
    word_r, sent_r = trajectory.reward_streams()
    word_g, sent_g = [0.0] * len(word_r), [0.0] * len(sent_r)
    g_w = g_s = 0.0
    for j in range(len(word_r) - 1, -1, -1):
        g_w = word_r[j] + gamma * g_w
        g_s = sent_r[j] + gamma * g_s
        word_g[j], sent_g[j] = g_w, g_s
    return ReturnsTable(word_returns=word_g, sent_returns=sent_g)


def advantages(returns, values, trajectory):
    """A_j = G_j - V_j for the active agent at each step."""
    if len(values) != len(trajectory):
        raise ValueError("value/trajectory length mismatch")
    return [returns.active_return(step) - float(values[step.j])
            for step in trajectory.steps]


# ---------------------------------------------------------------------------
# Abstractor environment

class AbstractedSentenceCache:
    """Memoizes the frozen abstractor's rewrite of each findings sentence."""

    def __init__(self, abstractor, vocab, beam=1):
        self.abstractor = abstractor
        self.vocab = vocab
        self.beam = beam
        self._cache = {}

    def get(self, report, sentence_index):
        key = (report.id, sentence_index)
        if key not in self._cache:
            tokens, _ = self.abstractor.abstract_sentence(
                report.findings[sentence_index], self.vocab, beam=self.beam)
            self._cache[key] = tokens
        return self._cache[key]


# ---------------------------------------------------------------------------
# Rollouts

def rollout(model, report, vocab, sentence_env, keyword_indices, lam=0.1,
            mode="sample", generator=None, step_cap=None):
    """Run one episode, keeping the policy log-prob graph for updates.

    `sentence_env` maps a selected sentence index to its abstracted token
    list (an AbstractedSentenceCache bound to the report, or any callable
    taking the index). The active level is sampled from the communicator's
    message in `sample` mode and thresholded at 0.5 in `greedy` mode.
    """
    enc = model.encode(report, vocab)
    n = enc.n_sentences
    if step_cap is None:
        step_cap = 2 * (n + max(len(keyword_indices), 1))
    env = sentence_env if callable(sentence_env) else \
        (lambda idx: sentence_env.get(report, idx))
    word_state, sent_state = model.initial_state(enc)
    mask = torch.zeros(n + 1, dtype=torch.bool, device=enc.sent_keys.device)
    traj = Trajectory()
    sent_cursor = word_cursor = 0
    abstracted_all, selected_word_tokens = [], []
    flat_tokens = report.flat_findings_tokens
    for j in range(step_cap):
        out = model.compute_step(word_state, sent_state, enc, mask)
        q = out.q
        if mode == "sample":
            take_word = bool(torch.bernoulli(q.detach(), generator=generator).item())
        else:
            take_word = bool(q.item() >= 0.5)
        if take_word:
            probs = torch.softmax(out.word_energy.detach(), dim=0)
            if mode == "sample":
                action = int(torch.multinomial(probs, 1, generator=generator).item())
            else:
                action = int(probs.argmax().item())
            log_prob = torch.log_softmax(out.word_energy, dim=0)[action]
            reward, word_cursor = word_reward(action, keyword_indices, word_cursor)
            traj.steps.append(TrajectoryStep(j, "w", action, float(q.item()),
                                             log_prob, float(reward)))
            selected_word_tokens.append(flat_tokens[action])
            word_sel, sent_sel = enc.word_states[action], enc.sent_end
        else:
            probs = torch.softmax(out.sent_energy.detach(), dim=0)
            if mode == "sample":
                action = int(torch.multinomial(probs, 1, generator=generator).item())
            else:
                action = int(probs.argmax().item())
            log_prob = torch.log_softmax(out.sent_energy, dim=0)[action]
            if action == n:
                traj.steps.append(TrajectoryStep(j, "s", action, float(q.item()),
                                                 log_prob, 0.0))
                traj.ended = True
                break
            abstracted = env(action)
            reward, sent_cursor = sentence_reward(abstracted, report.impressions,
                                                  sent_cursor)
            traj.steps.append(TrajectoryStep(j, "s", action, float(q.item()),
                                             log_prob, reward, abstracted))
            abstracted_all.append(abstracted)
            mask = mask.clone()
            mask[action] = True
            word_sel, sent_sel = enc.word_end, enc.sent_keys[action]
        word_state, sent_state = model.advance(
            word_state, sent_state, out, word_sel, sent_sel, q)
    else:
        traj.truncated = True
    keyword_tokens = [flat_tokens[i] for i in keyword_indices]
    traj.global_reward = global_reward(abstracted_all, selected_word_tokens,
                                       report.impressions, keyword_tokens, lam)
    return traj, enc


# ---------------------------------------------------------------------------
# Critic

class CriticModel(nn.Module):
    """LSTM value estimator conditioned on the ground-truth selections.

    The step-input layout mirrors the word decoder (contexts, selection
    representation, message slot), so its LSTM weights can be copied from
    D_w2w at initialization; the value head is fresh. Encoder states are
    consumed as detached features.
    """

    def __init__(self, hidden):
        super().__init__()
        self.hidden = hidden
        self.word_attn = AdditiveAttention(hidden, 2 * hidden, hidden)
        self.sent_attn = AdditiveAttention(hidden, 2 * hidden, hidden)
        self.cell = nn.LSTMCell(6 * hidden + 1, hidden)
        self.value_head = nn.Linear(hidden, 1)
        init_uniform_(self.cell)
        init_uniform_(self.value_head)

    def init_from_extractor(self, extractor_model):
        self.cell.load_state_dict(extractor_model.word_cell.state_dict())
        return self

    def forward(self, enc, labels, n_steps):
        """Value per step for `n_steps` steps; steps past the label sequence
        consume the word-encoder end representation."""
        word_states = enc.word_states.detach()
        sent_states = enc.sent_states.detach()
        word_end = enc.word_end.detach()
        device = word_states.device
        h = torch.zeros(self.hidden, dtype=word_states.dtype, device=device)
        c = torch.zeros_like(h)
        half = torch.tensor(0.5, dtype=word_states.dtype, device=device)
        values = []
        for j in range(n_steps):
            _, c_w = self.word_attn(h, word_states)
            _, c_s = self.sent_attn(h, sent_states)
            if j < len(labels.steps):
                step = labels.steps[j]
                if step.switch == 1:
                    gt = word_states[step.word]
                elif step.sentence is not None and step.sentence < sent_states.shape[0]:
                    gt = sent_states[step.sentence]
                else:
                    gt = word_end  # END label step
            else:
                gt = word_end
            x = torch.cat([c_w, c_s, gt, half.reshape(1)])
            hc = self.cell(x.unsqueeze(0), (h.unsqueeze(0), c.unsqueeze(0)))
            h, c = hc[0].squeeze(0), hc[1].squeeze(0)
            values.append(self.value_head(h).squeeze(0))
        return values


# ---------------------------------------------------------------------------
# Updates

@dataclass
class UpdateDiagnostics:
    mean_global_reward: float
    mean_episode_length: float
    mean_advantage_sent: float
    mean_advantage_word: float
    actor_loss: float
    critic_loss: float
    communicator_grad_norm: float


def dimac_update(model, critic, episodes, trainer, vocab, sentence_env,
                 keywords_by_id, labels_by_id, gamma=0.95, lam=0.1,
                 generator=None):
    """One batched actor-critic update over `episodes` (a list of reports).

    Advantages are treated as constants in the actor surrogate; the critic
    regresses onto the active agent's return; communicator parameters pick
    up gradient only through the actors' step inputs.
    """
    if not episodes:
        raise ValueError("empty episode batch")
    total_loss = None
    critic_loss_val = actor_loss_val = 0.0
    rg_sum = len_sum = 0.0
    adv_s, adv_w = [], []
    for report in episodes:
        traj, enc = rollout(model, report, vocab, sentence_env,
                            keywords_by_id[report.id], lam=lam, mode="sample",
                            generator=generator)
        if not traj.steps:
            continue
        returns = returns_and_q(traj, gamma)
        values = critic(enc, labels_by_id[report.id], len(traj))
        advs = advantages(returns, [v.item() for v in values], traj)
        actor_loss = None
        critic_loss = None
        for step, adv, value in zip(traj.steps, advs, values):
            term = -step.log_prob * adv
            actor_loss = term if actor_loss is None else actor_loss + term
            target = returns.active_return(step)
            sq = (value - value.new_tensor(target)) ** 2
            critic_loss = sq if critic_loss is None else critic_loss + sq
            (adv_w if step.level == "w" else adv_s).append(adv)
        episode_loss = actor_loss + critic_loss
        total_loss = episode_loss if total_loss is None else total_loss + episode_loss
        actor_loss_val += float(actor_loss.item())
        critic_loss_val += float(critic_loss.item())
        rg_sum += traj.global_reward
        len_sum += len(traj)
    if total_loss is None:
        raise RuntimeError("all episodes in the batch were empty")
    if not torch.isfinite(total_loss):
        raise FloatingPointError("non-finite DiMAC loss")
    (total_loss / len(episodes)).backward()
    comm_norm = math.sqrt(sum(
        float(p.grad.pow(2).sum()) for p in model.switch.parameters()
        if p.grad is not None))
    trainer.step()
    n = len(episodes)
    return UpdateDiagnostics(
        mean_global_reward=rg_sum / n,
        mean_episode_length=len_sum / n,
        mean_advantage_sent=float(np.mean(adv_s)) if adv_s else 0.0,
        mean_advantage_word=float(np.mean(adv_w)) if adv_w else 0.0,
        actor_loss=actor_loss_val / n,
        critic_loss=critic_loss_val / n,
        communicator_grad_norm=comm_norm)


def train_dimac(model, critic, reports, labels_by_id, keywords_by_id, vocab,
                sentence_env, updates=500, batch_size=4, lr=0.0001,
                clip_norm=1.5, gamma=0.95, lam=0.1, seed=0, log=None):
    """Run the full RL loop; returns the per-update diagnostics list."""
    from .nn import seed_everything
    seed_everything(seed)
    generator = torch.Generator().manual_seed(seed)
    trainer = ClippedAdam(list(model.parameters()) + list(critic.parameters()),
                          lr=lr, clip_norm=clip_norm)
    diagnostics = []
    idx = 0
    for step in range(updates):
        batch = []
        for _ in range(batch_size):
            batch.append(reports[idx % len(reports)])
            idx += 1
        diag = dimac_update(model, critic, batch, trainer, vocab, sentence_env,
                            keywords_by_id, labels_by_id, gamma=gamma, lam=lam,
                            generator=generator)
        diagnostics.append(diag)
        if log:
            log(step, diag)
    return diagnostics


# ---------------------------------------------------------------------------
# Variance-reduction property checks

def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def baseline_invariance_check(policy_logits, baseline, n_samples=10000, seed=0):
    """Monte Carlo check that E[grad log pi(a) * baseline] = 0.

    The policy is softmax(policy_logits) over K actions with the logits as
    parameters, so grad_k log pi(a) = 1[k=a] - pi_k. `baseline` is a
    callable(action) -> float; a state-only baseline ignores the action and
    must PASS (every coordinate mean within 3 standard errors of 0), an
    action-dependent one is expected to FAIL.
    """
    rng = np.random.default_rng(seed)
    probs = softmax(policy_logits)
    k = len(probs)
    actions = rng.choice(k, size=n_samples, p=probs)
    b = np.array([baseline(a) for a in actions], dtype=np.float64)
    grads = np.eye(k)[actions] - probs  # (n, k)
    samples = grads * b[:, None]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(n_samples)
    se = np.maximum(se, 1e-12)
    max_z = float(np.max(np.abs(mean) / se))
    return {"passed": bool(max_z <= 3.0), "mean": mean, "stderr": se,
            "max_z": max_z}


def multi_agent_baseline_check(word_logits, sent_logits, gate_prob, baseline,
                               n_samples=10000, seed=0):
    """Gated two-agent form: per step only the sampled active
    agent's grad log pi term enters the estimator; a state-only baseline
    must still give zero expectation over both agents' coordinates."""
    rng = np.random.default_rng(seed)
    pw, ps = softmax(word_logits), softmax(sent_logits)
    kw, ks = len(pw), len(ps)
    samples = np.zeros((n_samples, kw + ks))
    for i in range(n_samples):
        if rng.random() < gate_prob:  # word agent active
            a = rng.choice(kw, p=pw)
            samples[i, :kw] = (np.eye(kw)[a] - pw) * baseline(a)
        else:
            a = rng.choice(ks, p=ps)
            samples[i, kw:] = (np.eye(ks)[a] - ps) * baseline(a)
    mean = samples.mean(axis=0)
    se = np.maximum(samples.std(axis=0, ddof=1) / math.sqrt(n_samples), 1e-12)
    max_z = float(np.max(np.abs(mean) / se))
    return {"passed": bool(max_z <= 3.0), "mean": mean, "stderr": se,
            "max_z": max_z}


def policy_gradient_variance(policy_logits, rewards, baseline_value,
                             n_samples=10000, seed=0):
    """Total per-coordinate variance of the REINFORCE estimator
    (r(a) - b) * grad log pi(a) for a constant baseline b."""
    rng = np.random.default_rng(seed)
    probs = softmax(policy_logits)
    k = len(probs)
    actions = rng.choice(k, size=n_samples, p=probs)
    r = np.asarray(rewards, dtype=np.float64)[actions] - baseline_value
    samples = (np.eye(k)[actions] - probs) * r[:, None]
    return float(samples.var(axis=0, ddof=1).sum())
