"""Slow, independent reference implementations used as test oracles."""

import itertools
import math

import numpy as np


def permutation_shapley(values):
    """Average marginal contribution over all n! player orders."""
    n = int(round(math.log2(len(values))))
    phi = np.zeros(n)
    count = 0
    for order in itertools.permutations(range(n)):
        mask = 0
        for i in order:
            phi[i] += values[mask | (1 << i)] - values[mask]
            mask |= 1 << i
        count += 1
    return phi / count


def random_table(rng, n):
    """Random game with v(empty) = 0, indexed by bitmask."""
    v = rng.normal(size=1 << n)
    v[0] = 0.0
    return v


def head_loss_per_sample(teacher, feature_raw, y):
    """Teacher head loss, one sample at a time with a plain-python softmax."""
    losses = []
    for i in range(len(feature_raw)):
        out = teacher.head(feature_raw[i:i + 1])[0]
        if teacher.spec.loss == "ce":
            top = max(out)
            lse = top + math.log(sum(math.exp(o - top) for o in out))
            losses.append(lse - out[int(y[i])])
        else:
            d = out - np.reshape(y[i], out.shape)
            losses.append(float(np.mean(d * d)))
    return sum(losses) / len(losses)


def subset_feature(dec, subset):
    """Residual plus selected components, mapped back to raw teacher space."""
    z = dec.residual.copy()
    for i in subset:
        z = z + dec.components[i]
    return z * dec.standardizer.std + dec.standardizer.mean


def train_game_value(dec, teacher, y, subset):
    base = head_loss_per_sample(teacher, subset_feature(dec, []), y)
    return base - head_loss_per_sample(teacher, subset_feature(dec, subset), y)


def overfit_game_value(dec_tr, dec_te, teacher, y_tr, y_te, subset):
    def gap(s):
        return (head_loss_per_sample(teacher, subset_feature(dec_te, s), y_te)
                - head_loss_per_sample(teacher, subset_feature(dec_tr, s), y_tr))
    return gap(subset) - gap([])
