"""Contrastive-divergence training, exact gradients for small models,
momentum updates with a linear learning-rate schedule, and greedy
layer-wise stacking."""

import csv
import time
from dataclasses import dataclass

import numpy as np

from .dbn import DbnModel, average_log_loss
from .models import (
    DEFAULT_ENUM_BUDGET,
    GRBM,
    RBM,
    SRBM,
    Grbm,
    ModelError,
    Rbm,
    Srbm,
    binary_states,
    brute_force_log_partition,
    initialize_layer,
)
from .numerics import RngStream


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters for one layer's training run.

    Defaults follow the standard recipe: learning rate annealed linearly
    from 1e-2 to 1e-4, momentum 0.9 on all parameters, and weight decay of
    0.01 times the learning rate applied to weight and lateral matrices
    but not to biases.
    """

    cd_steps: int = 1
    epochs: int = 100
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.01
    batch_size: int = 100
    seed: int = 0
    mean_field_steps: int = 20
    mean_field_damping: float = 0.2

    def __post_init__(self):
        if self.cd_steps < 1:
            raise ValueError("cd_steps must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not (0 < self.lr_end <= self.lr_start):
            raise ValueError("need 0 < lr_end <= lr_start")
        if not (0 <= self.momentum < 1):
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def learning_rate(self, epoch):
        if self.epochs <= 1:
            return self.lr_start
        frac = min(max(epoch, 0), self.epochs - 1) / (self.epochs - 1)
        return self.lr_start + (self.lr_end - self.lr_start) * frac


class GradientAccumulator:
    """Per-parameter gradient arrays plus persistent momentum buffers."""

    def __init__(self, model):
        self.grads = {k: np.zeros_like(v) for k, v in model.parameter_arrays().items()}
        self.velocity = {k: np.zeros_like(v) for k, v in model.parameter_arrays().items()}
        self.last_recon_error = None

    def check_shapes(self, model):
        for name, arr in model.parameter_arrays().items():
            if self.grads[name].shape != arr.shape:
                raise ModelError("accumulator shape does not match the model")


def _positive_stats(model, x):
    n = x.shape[0]
    p = model.hidden_conditional(x)
    stats = {
        "xy": x.T @ p / n,
        "x": x.mean(axis=0),
        "y": p.mean(axis=0),
    }
    if model.variant == SRBM:
        stats["xx"] = x.T @ x / n
    return stats, p


def _fill_grads(acc, model, pos, neg):
    sigma = getattr(model, "sigma", None)
    if model.variant == GRBM:
        acc.grads["weights"][...] = (pos["xy"] - neg["xy"]) / sigma
        acc.grads["visible_bias"][...] = (pos["x"] - neg["x"]) / sigma ** 2
    else:
        acc.grads["weights"][...] = pos["xy"] - neg["xy"]
        acc.grads["visible_bias"][...] = pos["x"] - neg["x"]
    acc.grads["hidden_bias"][...] = pos["y"] - neg["y"]
    if model.variant == SRBM:
        lat = 0.5 * (pos["xx"] - neg["xx"])
        np.fill_diagonal(lat, 0.0)
        acc.grads["lateral"][...] = 0.5 * (lat + lat.T)


def cd_gradient(model, batch, n, rng, out=None, mean_field_steps=20, mean_field_damping=0.2):
    """CD(n) stochastic estimate of the log-likelihood gradient.

    The positive phase uses the conditional hidden means on the data; the
    negative phase uses the n-step reconstruction.  Lateral-connected
    models reconstruct visibles with damped parallel mean-field updates
    (training-time sampling); the mean-field means enter the negative
    statistics directly.
    """
    if n < 1:
        raise ValueError("contrastive divergence needs n >= 1")
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    if out is None:
        out = GradientAccumulator(model)
    out.check_shapes(model)

    pos, p_pos = _positive_stats(model, batch)
    hidden = (rng.random(p_pos.shape) < p_pos).astype(np.float64)
    recon = None
    for step in range(n):
        if model.variant == SRBM:
            recon = model.mean_field_visible(
                hidden, steps=mean_field_steps, damping=mean_field_damping
            )
        else:
            recon = model.sample_visible(hidden, rng)
        p_neg = model.hidden_conditional(recon)
        if step + 1 < n:
            hidden = (rng.random(p_neg.shape) < p_neg).astype(np.float64)
    n_rows = recon.shape[0]
    neg = {
        "xy": recon.T @ p_neg / n_rows,
        "x": recon.mean(axis=0),
        "y": p_neg.mean(axis=0),
    }
    if model.variant == SRBM:
        neg["xx"] = recon.T @ recon / n_rows
    _fill_grads(out, model, pos, neg)
    out.last_recon_error = float(np.mean((batch - recon) ** 2))
    return out


def exact_ml_gradient(model, batch, budget=DEFAULT_ENUM_BUDGET, out=None):
    """Exact log-likelihood gradient for enumerable models.

    The model expectation is computed by enumerating the analytic marginal
    side: visible states for binary models, hidden states (with analytic
    Gaussian moments) for Gaussian-visible models.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if out is None:
        out = GradientAccumulator(model)
    out.check_shapes(model)
    pos, _ = _positive_stats(model, batch)

    neg = {}
    if model.variant == GRBM:
        if 2 ** model.n_hidden > budget:
            raise ModelError("hidden enumeration above budget")
        hs = binary_states(model.n_hidden)
        logw = model.log_unnorm_hidden(hs)
        w = np.exp(logw - logw.max())
        w /= w.sum()
        mu = model.visible_bias + model.sigma * (hs @ model.weights.T)
        neg["xy"] = (mu * w[:, None]).T @ hs
        neg["x"] = w @ mu
        neg["y"] = w @ hs
    else:
        if 2 ** model.n_visible > budget:
            raise ModelError("visible enumeration above budget")
        vs = binary_states(model.n_visible)
        logw = model.log_unnorm_visible(vs)
        w = np.exp(logw - logw.max())
        w /= w.sum()
        p = model.hidden_conditional(vs)
        neg["xy"] = (vs * w[:, None]).T @ p
        neg["x"] = w @ vs
        neg["y"] = w @ p
        if model.variant == SRBM:
            neg["xx"] = (vs * w[:, None]).T @ vs
    _fill_grads(out, model, pos, neg)
    return out


def apply_update(model, acc, config, epoch):
    """One momentum step; returns the updated model.

    velocity <- momentum * velocity + lr * (grad - weight_decay * weights),
    parameters += velocity.  Weight decay touches weight and lateral
    matrices only.  The lateral matrix is re-symmetrized with a zero
    diagonal after the step.
    """
    lr = config.learning_rate(epoch)
    params = model.parameter_arrays()
    new = {}
    for name, value in params.items():
        g = acc.grads[name]
        if config.weight_decay and name in ("weights", "lateral"):
            g = g - config.weight_decay * value
        v = config.momentum * acc.velocity[name] + lr * g
        acc.velocity[name][...] = v
        new[name] = value + v
    if model.variant == RBM:
        return Rbm(new["weights"], new["visible_bias"], new["hidden_bias"])
    if model.variant == GRBM:
        return Grbm(new["weights"], new["visible_bias"], new["hidden_bias"], model.sigma)
    lat = 0.5 * (new["lateral"] + new["lateral"].T)
    np.fill_diagonal(lat, 0.0)
    return Srbm(new["weights"], new["visible_bias"], new["hidden_bias"], lat)


def _guard(model, epoch):
    for name, arr in model.parameter_arrays().items():
        if np.isnan(arr).any():
            raise TrainingDiverged(f"NaN in {name} at epoch {epoch}")
        if np.abs(arr).max() > 1e6:
            raise TrainingDiverged(f"{name} exceeded 1e6 at epoch {epoch}")


def train_layer(
    model,
    data,
    config,
    data_provider=None,
    exact_loss=False,
    log_path=None,
    budget=DEFAULT_ENUM_BUDGET,
    gradient_fn=None,
):
    """Mini-batch CD training of a single layer.

    Shuffling is reseeded per epoch from the run seed.  Emits per-epoch
    diagnostics (reconstruction error, learning rate, optional exact
    log-loss in bits per component, wall time) and optionally a CSV log.
    ``data_provider(epoch)`` may replace the fixed data matrix to feed
    fresh samples every epoch.  Aborts with TrainingDiverged on NaNs,
    runaway parameters, or a log-loss that worsens by more than one bit
    over ten epochs.
    """
    model = model.copy()
    if data is None and data_provider is None:
        raise ValueError("need a data matrix or a data provider")
    if data is not None:
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if data.shape[1] != model.n_visible:
            raise ModelError("data dimension does not match the model")
    acc = GradientAccumulator(model)
    stream = RngStream(config.seed)
    diagnostics = []
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "lr", "recon_error", "exact_log_loss", "wall_time"])
    recent_losses = []
    try:
        for epoch in range(config.epochs):
            started = time.perf_counter()
            epoch_data = data_provider(epoch) if data_provider is not None else data
            perm = stream.substream(epoch, 0).permutation(epoch_data.shape[0])
            cd_rng = stream.substream(epoch, 1)
            shuffled = epoch_data[perm]
            errors = []
            for lo in range(0, shuffled.shape[0], config.batch_size):
                batch = shuffled[lo : lo + config.batch_size]
                if gradient_fn is not None:
                    gradient_fn(model, batch, out=acc)
                else:
                    cd_gradient(
                        model,
                        batch,
                        config.cd_steps,
                        cd_rng,
                        out=acc,
                        mean_field_steps=config.mean_field_steps,
                        mean_field_damping=config.mean_field_damping,
                    )
                model = apply_update(model, acc, config, epoch)
                if acc.last_recon_error is not None:
                    errors.append(acc.last_recon_error)
            _guard(model, epoch)
            entry = {
                "epoch": epoch,
                "lr": config.learning_rate(epoch),
                "recon_error": float(np.mean(errors)) if errors else float("nan"),
                "exact_log_loss": None,
                "wall_time": time.perf_counter() - started,
            }
            if exact_loss:
                log_z = brute_force_log_partition(model, budget=budget)
                entry["exact_log_loss"] = average_log_loss(
                    epoch_data, lambda rows: model.log_unnorm_visible(rows) - log_z
                )
                recent_losses.append(entry["exact_log_loss"])
                window = recent_losses[-11:]
                if len(window) == 11 and window[-1] > window[0] + 1.0:
                    raise TrainingDiverged(
                        f"log-loss worsened by more than 1 bit over 10 epochs "
                        f"(epoch {epoch})"
                    )
            diagnostics.append(entry)
            if writer is not None:
                writer.writerow(
                    [
                        entry["epoch"],
                        f"{entry['lr']:.10g}",
                        f"{entry['recon_error']:.10g}",
                        "" if entry["exact_log_loss"] is None else f"{entry['exact_log_loss']:.10g}",
                        f"{entry['wall_time']:.6f}",
                    ]
                )
    finally:
        if log_file is not None:
            log_file.close()
    return model, diagnostics


def init_srbm_from_grbm(grbm, n_hidden):
    """Second layer whose visible marginal equals the first layer's hidden
    marginal, exactly.

    The Gaussian layer's hidden marginal is, up to a constant,
    exp(c'y + b'Wy/s + |Wy|^2 / 2).  For binary y, y_i^2 = y_i, so the
    quadratic splits into off-diagonal couplings and a linear part:
    |Wy|^2 / 2 = y'(W'W)y / 2 = y'L y / 2 + diag(W'W)'y / 2 with L the
    zero-diagonal part of W'W.  A lateral-connected layer with zero
    weights, lateral matrix L and visible bias c + W'b/s + diag(W'W)/2
    therefore has exactly this visible marginal, whatever its hidden
    biases; they are set to -1 as in fresh initialization.
    """
    if grbm.variant != GRBM:
        raise ModelError("initialization trick needs a gaussian first layer")
    gram = grbm.weights.T @ grbm.weights
    lateral = gram.copy()
    np.fill_diagonal(lateral, 0.0)
    lateral = 0.5 * (lateral + lateral.T)
    np.fill_diagonal(lateral, 0.0)
    visible_bias = (
        grbm.hidden_bias
        + grbm.weights.T @ grbm.visible_bias / grbm.sigma
        + 0.5 * np.diag(gram)
    )
    weights = np.zeros((grbm.n_hidden, n_hidden))
    hidden_bias = np.full(n_hidden, -1.0)
    return Srbm(weights, visible_bias, hidden_bias, lateral)


@dataclass
class LayerSpec:
    variant: str
    n_hidden: int
    sigma: float = None
    weight_scale: float = 0.01


def train_dbn_greedy(layer_specs, data, configs, log_dir=None, exact_loss=False):
    """Greedy layer-wise training of a stack.

    The first layer trains on the data; each higher layer trains on
    binary representations obtained by conditionally sampling through the
    already-trained layers, redrawn fresh every epoch.  When a gaussian
    first layer is followed by a lateral-connected layer, the second layer
    starts from the marginal-matching initialization instead of random
    weights.  Lower layers are never revisited.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if len(layer_specs) != len(configs):
        raise ValueError("need one config per layer spec")
    trained = []
    all_diagnostics = []
    for idx, (spec, config) in enumerate(zip(layer_specs, configs)):
        n_visible = data.shape[1] if idx == 0 else trained[-1].n_hidden
        init_rng = RngStream(config.seed).substream(idx, 7)
        if (
            idx > 0
            and trained[-1].variant == GRBM
            and spec.variant == SRBM
        ):
            model = init_srbm_from_grbm(trained[-1], spec.n_hidden)
        else:
            model = initialize_layer(
                spec.variant,
                n_visible,
                spec.n_hidden,
                init_rng,
                sigma=spec.sigma,
                weight_scale=spec.weight_scale,
            )
        if idx == 0:
            provider = None
            layer_data = data
        else:
            lower = list(trained)

            def provider(epoch, _lower=lower, _seed=config.seed, _idx=idx):
                rng = RngStream(_seed).substream(_idx, 11, epoch)
                current = data
                for layer in _lower:
                    current = layer.sample_hidden(current, rng)
                return current

            layer_data = provider(0)
        log_path = None
        if log_dir is not None:
            log_path = f"{log_dir}/train_layer_{idx:02d}.csv"
        model, diag = train_layer(
            model,
            layer_data,
            config,
            data_provider=provider,
            exact_loss=exact_loss,
            log_path=log_path,
        )
        trained.append(model)
        all_diagnostics.append(diag)
    return DbnModel(trained), all_diagnostics
