"""Fine-tuning loop: synthetic tasks, subsampling, AdamW, best-checkpoint selection."""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from kpft import grad, rng
from kpft.model import build, forward, trainable_parameters
from kpft.parambudget import base_parameters

LOW_RESOURCE_SIZES = (100, 500, 1000, 2000, 4000)
NUMPY_DTYPES = {"f32": np.float32, "f64": np.float64}


class NumericAbort(RuntimeError):
    pass


# -- tasks ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Sequence classification with labels fixed by the tokens and the task seed.

    parity      number of "on" tokens mod 2
    majority    1 if more than half the tokens are "on"
    copy-class  class assigned to the first token
    Half the vocabulary (chosen by the seed) is "on".
    """

    kind: str
    vocab: int
    seq_len: int
    classes: int = 2
    seed: int = 0

    def _token_table(self):
        perm = rng.stream(self.seed, rng.TASK).permutation(self.vocab)
        on = np.zeros(self.vocab, dtype=bool)
        on[perm[: self.vocab // 2]] = True
        token_class = np.empty(self.vocab, dtype=np.int64)
        token_class[perm] = np.arange(self.vocab) % self.classes
        return on, token_class

    def label(self, tokens):
        tokens = np.asarray(tokens)
        on, token_class = self._token_table()
        if self.kind == "parity":
            return on[tokens].sum(axis=1) % 2
        if self.kind == "majority":
            return (2 * on[tokens].sum(axis=1) > tokens.shape[1]).astype(np.int64)
        if self.kind == "copy-class":
            return token_class[tokens[:, 0]]
        raise ValueError(f"unknown task kind {self.kind!r}")

    def sample(self, count, gen):
        tokens = gen.integers(0, self.vocab, size=(count, self.seq_len))
        return Dataset(tokens, self.label(tokens))


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.tokens[idx], self.labels[idx])


def make_splits(config):
    """(train pool, validation, test) drawn from the data stream of ``config.seed``."""
    g, t = config.model, config.task
    task = SyntheticTask(t.kind, g.vocab, t.seq_len, g.classes, config.seed)
    gen = rng.stream(config.seed, rng.DATA)
    return task.sample(t.train_size, gen), task.sample(t.val_size, gen), task.sample(t.test_size, gen)


def subsample(dataset, size, seed, trial=0):
    """Label-stratified sample without replacement; returns the subset in original order."""
    n = len(dataset)
    if not 0 < size <= n:
        raise ValueError(f"subsample size {size} must lie in [1, {n}]")
    gen = rng.stream(seed, rng.SUBSAMPLE, trial)
    classes, counts = np.unique(dataset.labels, return_counts=True)
    exact = size * counts / n
    quota = np.floor(exact).astype(np.int64)
    # largest remainders get the leftover slots; ties go to the lower class
    order = sorted(range(len(classes)), key=lambda i: (-(exact[i] - quota[i]), i))
    for i in order[: size - quota.sum()]:
        quota[i] += 1
    picked = []
    for c, q in zip(classes, quota):
        members = np.flatnonzero(dataset.labels == c)
        picked.append(gen.permutation(members)[:q])
    idx = np.sort(np.concatenate(picked))
    return dataset.subset(idx)


def batches(n, batch_size, gen):
    """Endless sequential batches over a fresh shuffle each epoch."""
    while True:
        perm = gen.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


# -- optimizer -----------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float
    warmup_steps: int = 0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, optim):
        return cls(lr=optim.lr, warmup_steps=optim.warmup_steps, weight_decay=optim.weight_decay,
                   beta1=optim.beta1, beta2=optim.beta2, eps=optim.eps)

    def current_lr(self):
        if self.warmup_steps and self.step < self.warmup_steps:
            return self.lr * self.step / self.warmup_steps
        return self.lr


def adamw_step(params, grads, state):
    """One AdamW update, in place.

    ``params`` is a list of (path, Var); ``grads`` the matching arrays. Weight
    decay is decoupled and applied after the Adam step, scaled by the current
    learning rate. The learning rate ramps linearly over ``warmup_steps``.
    """
    for (path, _), g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient for {path} at step {state.step + 1}")
    state.step += 1
    t = state.step
    lr = state.current_lr()
    b1, b2 = state.beta1, state.beta2
    step_size = lr * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for (path, var), g in zip(params, grads):
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(var.value)
            state.v[path] = np.zeros_like(var.value)
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        var.value -= step_size * m / (np.sqrt(v) + state.eps)
        if state.weight_decay:
            var.value -= (lr * state.weight_decay) * var.value
    return params, state


# -- training ------------------------------------------------------------------------

@dataclass
class TrainReport:
    losses: list
    final_accuracy: float  # test accuracy of the best-on-validation checkpoint
    best_val_accuracy: float
    best_step: int
    steps: int
    trainable_parameters: int
    total_parameters: int
    trained_fraction: float
    train_size: int
    model: object = field(default=None, compare=False, repr=False)

    def record(self):
        fmt = lambda x: format(x, ".9g")  # noqa: E731
        return {"report": {
            "final_accuracy": fmt(self.final_accuracy),
            "best_val_accuracy": fmt(self.best_val_accuracy),
            "best_step": self.best_step,
            "steps": self.steps,
            "train_size": self.train_size,
            "trainable_parameters": self.trainable_parameters,
            "total_parameters": self.total_parameters,
            "trained_fraction": fmt(self.trained_fraction),
            "losses": ",".join(fmt(x) for x in self.losses),
        }}


def accuracy(model, dataset, chunk=512):
    correct = 0
    for start in range(0, len(dataset), chunk):
        logits = forward(model, dataset.tokens[start:start + chunk]).value
        correct += int((logits.argmax(axis=1) == dataset.labels[start:start + chunk]).sum())
    return correct / len(dataset)


def build_for(config):
    return build(config.model, config.adapter, seed=config.seed, mode=config.mode,
                 dtype=NUMPY_DTYPES[config.dtype], trial=config.trial)


def training_data(config):
    train, val, test = make_splits(config)
    if config.task.subsample_size:
        train = subsample(train, config.task.subsample_size, config.seed, config.trial)
    return train, val, test


def run_training(config, log=None):
    """Train the adapters (or biases) of a fresh model; deterministic in (config, seed, trial)."""
    train, val, test = training_data(config)
    model = build_for(config)
    params = trainable_parameters(model)
    state = OptimState.from_config(config.optim)
    feed = batches(len(train), config.optim.batch_size, rng.stream(config.seed, rng.BATCHES, config.trial))

    losses = []
    best_val, best_step = accuracy(model, val), 0
    best = {p: v.value.copy() for p, v in params}
    for step in range(1, config.optim.steps + 1):
        idx = next(feed)
        with grad.Tape() as tape:
            loss = grad.cross_entropy(forward(model, train.tokens[idx]), train.labels[idx])
        grad.backward(loss, tape)
        adamw_step(params, [v.grad for _, v in params], state)
        value = float(loss.value.reshape(()))
        if not np.isfinite(value):
            raise NumericAbort(f"non-finite loss at step {step}")
        losses.append(value)
        if log is not None and step % config.optim.log_every == 0:
            log(f"step={step} loss={value:.9g}")
        if step % config.optim.eval_every == 0 or step == config.optim.steps:
            acc = accuracy(model, val)
            if acc > best_val:
                best_val, best_step = acc, step
                best = {p: v.value.copy() for p, v in params}

    for path, var in params:
        var.value[...] = best[path]
    trainable = sum(v.value.size for _, v in params)
    total = base_parameters(config.model)
    return TrainReport(
        losses=losses,
        final_accuracy=accuracy(model, test),
        best_val_accuracy=best_val,
        best_step=best_step,
        steps=config.optim.steps,
        trainable_parameters=trainable,
        total_parameters=total,
        trained_fraction=trainable / total,
        train_size=len(train),
        model=model,
    )


@dataclass
class SweepRow:
    size: int
    accuracies: list

    @property
    def mean(self):
        return float(np.mean(self.accuracies))

    @property
    def std(self):
        return float(np.std(self.accuracies))


def low_resource_sweep(config, sizes=LOW_RESOURCE_SIZES, seeds=5, log=None):
    """Test accuracy per training-set size, over ``seeds`` trials each.

    Trials change the subsample, batch order and adapter initialisation; the
    frozen model and the evaluation splits stay fixed.
    """
    rows = []
    for size in sizes:
        accs = []
        for trial in range(seeds):
            cfg = dataclasses.replace(config, trial=trial,
                                      task=dataclasses.replace(config.task, subsample_size=size))
            accs.append(run_training(cfg).final_accuracy)
        row = SweepRow(size, accs)
        if log is not None:
            log(f"size={size} mean={row.mean:.9g} std={row.std:.9g}")
        rows.append(row)
    return rows
