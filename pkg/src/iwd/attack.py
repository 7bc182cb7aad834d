"""IWD attacks (critic-based and Sinkhorn-based), FGSM/PGD baselines, and ASR.

The perturbation is a direct field: x_adv = clip(x + delta, 0, 1), with delta
optimized by per-image gradient descent (plain or Adam). Each outer iteration
trains the patch critic for ``n_critic`` steps, then takes one step on

    -mean_v f(v) + tau * L_c            (dual variant)
    S_eps(x, x_adv) + tau * L_c         (primal variant, unrolled Sinkhorn)

where L_c is -CE(h(x_adv), y) for untargeted and CE(h(x_adv), y_t) for
targeted attacks. An image stops as soon as it is adversarial and its exact
IWD is within budget.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import transport
from .diffcore import backward, cross_entropy, linear_head
from .errors import LabelError, NumericError, ValidationError
from .patches import PatchGrid, fold_patches, patch_array
from .transport import CriticState, critic_ascent_step, make_critic, sinkhorn_divergence

MODES = ("untargeted", "targeted")
VARIANTS = ("dual", "primal")


@dataclass
class AttackConfig:
    mode: str = "untargeted"
    target: int = None
    tau: float = 0.1
    lam: float = 10.0
    n_critic: int = 5
    max_iter: int = 400
    eps_w: float = None
    seed: int = 0
    grid: PatchGrid = field(default_factory=PatchGrid)
    variant: str = "dual"
    step_size: float = 3.0
    optimizer: str = "sgd"
    step_decay: bool = True
    step_betas: tuple = (0.5, 0.999)
    critic_lr: float = 1e-2
    beta1: float = 0.5
    beta2: float = 0.999
    init_noise: float = 0.01
    critic_hidden: tuple = (64, 64)
    sinkhorn_iter: int = 50
    sinkhorn_reg_scale: float = 0.05
    early_stop: bool = True
    gate_classification: bool = True
    one_sided_penalty: bool = True
    penalty_norm: str = "l2"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError("perturbation optimizer must be adam or sgd")
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}")
        if self.mode == "targeted" and (self.target is None or self.target < 0):
            raise ValidationError("targeted mode needs a target class")
        if self.tau < 0:
            raise ValidationError("tau must be >= 0")
        if not self.lam > 0:
            raise ValidationError("lambda must be > 0")
        if self.n_critic < 1 or self.max_iter < 0:
            raise ValidationError("n_critic >= 1 and max_iter >= 0 are required")
        if self.eps_w is not None and self.eps_w < 0:
            raise ValidationError("IWD budget must be >= 0")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    label: int
    pred: int
    success: bool
    budget_satisfied: bool
    iwd: float
    l2: float
    linf: float
    iterations: int
    losses: dict = field(default_factory=dict)

    def record(self):
        return {"label": int(self.label), "pred": int(self.pred), "success": bool(self.success),
                "budget_satisfied": bool(self.budget_satisfied), "iwd": float(self.iwd),
                "l2": float(self.l2), "linf": float(self.linf), "iterations": int(self.iterations),
                "losses": {k: float(v) for k, v in self.losses.items()}}


def classification_loss_term(model, x_adv, label, mode="untargeted"):
    """-CE to the true label (untargeted) or CE to the target (targeted)."""
    logits = model.logits(x_adv)[0]
    ce = cross_entropy(logits, label)
    if mode == "untargeted":
        return -ce
    if mode == "targeted":
        return ce
    raise ValidationError(f"unknown mode {mode!r}")


def _cls_grad(model, X, labels, mode):
    """Per-image L_c values and gradients w.r.t. the images."""
    sign = -1.0 if mode == "untargeted" else 1.0
    _, g = model.loss_input_grad(X, labels, np.full(len(X), sign))
    return sign * model.loss(X, labels), g


def _is_success(pred, y, cfg):
    if cfg.mode == "targeted":
        return pred == cfg.target
    return pred != y


def _exact_iwd_batch(X, Xa, grid):
    U = patch_array(X, grid)
    V = patch_array(Xa, grid)
    out = np.empty(len(X))
    for i in range(len(X)):
        out[i] = transport.exact_w1(transport.kernels.l1_cost(U[i], V[i])).value
    return out


class _Adam:
    """Per-image Adam (or plain gradient descent) over a batch of images."""

    def __init__(self, shape, lr, beta1, beta2, eps=1e-8, plain=False):
        self.lr, self.b1, self.b2, self.eps, self.plain = lr, beta1, beta2, eps, plain
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0], dtype=np.int64)

    def step(self, x, g, idx):
        """Update rows ``idx`` of x with the matching rows of g."""
        self.t[idx] += 1
        if self.plain:
            return x[idx] - self.lr * g
        t = self.t[idx].reshape(-1, *([1] * (x.ndim - 1)))
        self.m[idx] = self.b1 * self.m[idx] + (1 - self.b1) * g
        self.v[idx] = self.b2 * self.v[idx] + (1 - self.b2) * g ** 2
        mhat = self.m[idx] / (1 - self.b1 ** t)
        vhat = self.v[idx] / (1 - self.b2 ** t)
        return x[idx] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def per_image_seed(master, index):
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _sub_critic(critic, idx):
    opt = replace(critic.opt, m=critic.opt.m[idx], v=critic.opt.v[idx])
    return CriticState(critic.spec, critic.params[idx], critic.lam, critic.n_critic, opt, critic.one_sided,
                       critic.penalty_norm)


def _put_critic(critic, sub, idx):
    critic.params[idx] = sub.params
    critic.opt.m[idx] = sub.opt.m
    critic.opt.v[idx] = sub.opt.v
    critic.opt = replace(critic.opt, t=sub.opt.t)


def _dual_grad(critic, U, V, rngs, shared):
    """Train the critic(s) and return d/dV of -(1/N) sum_v f(v) per image."""
    B, N, d = V.shape
    if shared:
        Uf, Vf = U.reshape(-1, d), V.reshape(-1, d)
        for _ in range(critic.n_critic):
            w, gp = critic_ascent_step(critic, Uf, Vf, rngs)
        coef = np.full((B * N, 1), -1.0 / N)
        g = backward(critic.spec, critic.params, Vf, linear_head(coef)).grad_input
        return g.reshape(B, N, d), w, gp
    for _ in range(critic.n_critic):
        w, gp = critic_ascent_step(critic, U, V, rngs)
    g = backward(critic.spec, critic.params, V, linear_head(np.full((B, N, 1), -1.0 / N)))
    return g.grad_input, w / B, gp


def _primal_grad(U, V, cfg):
    g = np.zeros_like(V)
    total = 0.0
    for i in range(len(V)):
        C = transport.kernels.l1_cost(U[i], V[i])
        eps = cfg.sinkhorn_reg_scale * max(C.max(), 1e-12)
        val, g[i] = sinkhorn_divergence(U[i], V[i], eps, cfg.sinkhorn_iter)
        total += val
    return g, total / max(len(V), 1)


def iwda_batch(X, Y, model, cfg, rng=None, critic=None, return_state=False, indices=None,
               shared_critic=False):
    """Attack a batch of images.

    Each image gets its own critic and random stream, seeded from
    (cfg.seed, index); ``indices`` gives the dataset index of each row. With
    ``shared_critic`` one critic serves the whole batch (it matches the pooled
    patch distribution) and ``critic`` may carry one over from a previous
    call; ``rng`` then drives it.

    Returns (X_adv, info) with per-image arrays success, budget_satisfied,
    iwd, iterations and pred. An image that ever became adversarial returns
    its lowest-IWD adversarial iterate.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.atleast_1d(np.asarray(Y, dtype=np.int64))
    B = len(X)
    if np.any(Y < 0) or np.any(Y >= model.n_classes):
        raise LabelError("labels out of range")
    if cfg.mode == "targeted" and cfg.target >= model.n_classes:
        raise LabelError("target class out of range")
    grid = cfg.grid
    shape = X.shape[1:]
    U = patch_array(X, grid)                       # (B, N, d)
    d = U.shape[2]
    idx_all = np.arange(B) if indices is None else np.asarray(indices)
    rngs = [np.random.default_rng(per_image_seed(cfg.seed, int(i))) for i in idx_all]
    if shared_critic:
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
    dual = cfg.variant == "dual"
    if dual and critic is None:
        critic = make_critic(d, rng if shared_critic else rngs, cfg.critic_hidden, cfg.lam,
                             cfg.n_critic, cfg.critic_lr, cfg.beta1, cfg.beta2, cfg.one_sided_penalty,
                             cfg.penalty_norm)

    if cfg.init_noise > 0:
        noise = np.stack([r.standard_normal(shape) for r in rngs])
        Xa = np.clip(X + cfg.init_noise * noise, 0.0, 1.0)
    else:
        Xa = X.copy()
    opt = _Adam(X.shape, cfg.step_size, *cfg.step_betas, plain=cfg.optimizer == "sgd")
    active = np.ones(B, dtype=bool)
    adv = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=np.int64)
    budget = np.inf if cfg.eps_w is None else cfg.eps_w
    target = Y if cfg.mode == "untargeted" else np.full(B, cfg.target)
    best = Xa.copy()
    best_w = np.full(B, np.inf)
    last = {}

    for it in range(cfg.max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        V = patch_array(Xa[idx], grid)
        if dual and shared_critic:
            g_patch, last["critic_w"], last["gp"] = _dual_grad(critic, U[idx], V, rng, True)
        elif dual:
            sub = _sub_critic(critic, idx)
            g_patch, last["critic_w"], last["gp"] = _dual_grad(sub, U[idx], V, [rngs[i] for i in idx], False)
            _put_critic(critic, sub, idx)
        else:
            g_patch, last["sinkhorn"] = _primal_grad(U[idx], V, cfg)
        grad = fold_patches(g_patch, shape, grid)
        if cfg.tau > 0:
            lc, g_cls = _cls_grad(model, Xa[idx], target[idx], cfg.mode)
            if cfg.gate_classification:
                # -CE has no floor; once the label flips only the similarity term acts
                g_cls[adv[idx]] = 0.0
            grad = grad + cfg.tau * g_cls
            last["cls"] = float(lc.mean())
        if not np.all(np.isfinite(grad)):
            raise NumericError("perturbation gradient diverged", state=Xa)
        if cfg.step_decay:
            opt.lr = cfg.step_size * (1.0 - it / cfg.max_iter)
        Xa[idx] = np.clip(opt.step(Xa, grad, idx), 0.0, 1.0)
        iters[idx] += 1

        adv[idx] = _is_success(model.predict(Xa[idx]), Y[idx], cfg)
        hit = idx[adv[idx]]
        if len(hit):
            w = _exact_iwd_batch(X[hit], Xa[hit], grid)
            better = w < best_w[hit]
            best[hit[better]] = Xa[hit[better]]
            best_w[hit[better]] = w[better]
            if cfg.early_stop:
                active[hit[w <= budget + 1e-12]] = False

    found = np.isfinite(best_w)
    Xa[found] = best[found]
    pred = model.predict(Xa)
    success = _is_success(pred, Y, cfg)
    w = _exact_iwd_batch(X, Xa, grid)
    info = {"success": success, "budget_satisfied": w <= budget + 1e-12, "iwd": w,
            "iterations": iters, "pred": pred, "losses": last}
    if return_state:
        info["critic"] = critic
    return Xa, info


def _result(x, xa, y, info, i):
    diff = (xa - x).ravel()
    return AttackResult(xa, int(y), int(info["pred"][i]), bool(info["success"][i]),
                        bool(info["budget_satisfied"][i]), float(info["iwd"][i]),
                        float(np.sqrt(diff @ diff)), float(np.abs(diff).max()) if diff.size else 0.0,
                        int(info["iterations"][i]), dict(info["losses"]))


def iwda_attack(x, y, model, cfg=None):
    """Critic-based IWD attack on one image."""
    cfg = AttackConfig(variant="dual") if cfg is None else cfg
    xa, info = iwda_batch(np.asarray(x)[None], [y], model, cfg)
    return _result(np.asarray(x, dtype=np.float64), xa[0], y, info, 0)


def iwda_primal_attack(x, y, model, cfg=None):
    """Sinkhorn-penalized IWD attack on one image."""
    cfg = AttackConfig(variant="primal") if cfg is None else cfg
    if cfg.variant != "primal":
        cfg = AttackConfig(**{**cfg.__dict__, "variant": "primal"})
    xa, info = iwda_batch(np.asarray(x)[None], [y], model, cfg)
    return _result(np.asarray(x, dtype=np.float64), xa[0], y, info, 0)


def iwda_images(X, Y, model, cfg, indices=None, batch_size=64):
    """Per-image attacks (own critic and seed each) as AttackResult records."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y)
    idx = np.arange(len(X)) if indices is None else np.asarray(indices)
    out = []
    for s in range(0, len(X), batch_size):
        xa, info = iwda_batch(X[s:s + batch_size], Y[s:s + batch_size], model, cfg,
                              indices=idx[s:s + batch_size])
        out += [_result(X[s + i], xa[i], Y[s + i], info, i) for i in range(len(xa))]
    return out


# ---------------------------------------------------------------------------
# l_inf baselines
# ---------------------------------------------------------------------------


def fgsm(x, y, model, eps):
    """x + eps * sign(∇_x CE), clipped to [0, 1]. Works on one image or a batch."""
    if eps < 0:
        raise ValidationError("eps must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    _, g = model.loss_input_grad(x, y)
    return np.clip(x + eps * np.sign(g), 0.0, 1.0)


def pgd(x, y, model, eps, alpha, steps):
    """Signed-gradient ascent projected onto the l_inf ball and the unit box."""
    if eps < 0 or alpha < 0:
        raise ValidationError("eps and alpha must be >= 0")
    if steps < 1:
        raise ValidationError("PGD needs at least one step")
    x = np.asarray(x, dtype=np.float64)
    xa = x.copy()
    for _ in range(steps):
        _, g = model.loss_input_grad(xa, y)
        xa = xa + alpha * np.sign(g)
        xa = np.clip(np.clip(xa, x - eps, x + eps), 0.0, 1.0)
    return xa


# ---------------------------------------------------------------------------
# success rate
# ---------------------------------------------------------------------------


def eligible(model, X, Y):
    return model.predict(X) == np.asarray(Y)


def asr(attacker, model, X, Y, target=None):
    """Attack success rate over the samples the model classifies correctly.

    ``attacker(X, Y) -> X_adv`` works on a batch.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y)
    ok = eligible(model, X, Y)
    if target is not None:
        ok &= Y != target
    if not ok.any():
        raise ValidationError("no eligible samples: the classifier misclassifies every input")
    Xa = attacker(X[ok], Y[ok])
    pred = model.predict(Xa)
    hits = pred == target if target is not None else pred != Y[ok]
    return float(hits.mean())


def asr_from_flags(successes):
    s = np.asarray(successes, dtype=bool)
    if s.size == 0:
        raise ValidationError("no eligible samples")
    return float(s.mean())


def default_budget(dataset, grid=PatchGrid(), n_pairs=200, seed=0):
    """Half the mean exact IWD between random same-class pairs of images."""
    rng = np.random.default_rng(seed)
    vals = []
    labels = dataset.labels
    for _ in range(n_pairs):
        k = labels[rng.integers(len(labels))]
        members = np.flatnonzero(labels == k)
        if len(members) < 2:
            continue
        i, j = rng.choice(members, size=2, replace=False)
        vals.append(transport.iwd(dataset.images[i], dataset.images[j], grid).value)
    if not vals:
        raise ValidationError("need at least one class with two images")
    return 0.5 * float(np.mean(vals))
