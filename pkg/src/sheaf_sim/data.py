"""Synthetic multimodal datasets drawn from a shared latent model.

Every sample has a latent ``z ~ N(0, I)``; its label is
``argmax(label_weights @ z)`` and modality ``k`` observes
``R_ik A_k z + noise``. ``A_k`` is a modality-specific linear view and
``R_ik`` a client-specific rotation whose strength is set by
``heterogeneity`` (0 = identical views everywhere).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import InvalidFraction, ModalityAbsent
from .graph import ClientGraph


@dataclass(frozen=True)
class LatentTaskSpec:
    latent_dim: int
    n_classes: int
    modality_projections: tuple[np.ndarray, ...]
    label_weights: np.ndarray
    noise_std: float
    seed: int

    @property
    def input_dims(self) -> dict[int, int]:
        return {k: a.shape[0] for k, a in enumerate(self.modality_projections)}


@dataclass(frozen=True)
class ClientDataset:
    client: int
    x: dict[int, np.ndarray]
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray

    def split(self, which: str) -> tuple[dict[int, np.ndarray], np.ndarray]:
        idx = self.train_idx if which == "train" else self.test_idx
        return {k: v[idx] for k, v in self.x.items()}, self.y[idx]

    @property
    def train(self):
        return self.split("train")

    @property
    def test(self):
        return self.split("test")


def _orthonormal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def make_task_spec(
    latent_dim: int,
    n_classes: int,
    input_dims: Sequence[int],
    noise_std: float = 0.1,
    seed: int = 0,
) -> LatentTaskSpec:
    """Seeded projections ``A_k`` (full rank) and label weights.

    Label rows are orthonormal when ``n_classes <= latent_dim`` so that
    classes are equiprobable.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
    projections = []
    for m_k in input_dims:
        while True:
            a = rng.standard_normal((m_k, latent_dim)) / np.sqrt(latent_dim)
            if np.linalg.matrix_rank(a) == min(m_k, latent_dim):
                break
        projections.append(a)
    if n_classes <= latent_dim:
        label_w = _orthonormal(rng, latent_dim)[:n_classes]
    else:
        label_w = rng.standard_normal((n_classes, latent_dim))
        label_w /= np.linalg.norm(label_w, axis=1, keepdims=True)
    return LatentTaskSpec(latent_dim, n_classes, tuple(projections), label_w,
                          float(noise_std), int(seed))


def client_rotation(m_k: int, heterogeneity: float, seed: int, client: int, k: int) -> np.ndarray:
    """``orthonormalize((1 - t) I + t Q)`` for a seeded random orthogonal ``Q``."""
    if heterogeneity == 0.0:
        return np.eye(m_k)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB07, client, k]))
    q = _orthonormal(rng, m_k)
    blend = (1.0 - heterogeneity) * np.eye(m_k) + heterogeneity * q
    u, _, vt = np.linalg.svd(blend)
    return u @ vt


def generate(
    spec: LatentTaskSpec,
    graph: ClientGraph,
    n_per_client: int,
    heterogeneity: float = 0.0,
    split_frac: float = 0.8,
) -> list[ClientDataset]:
    if not 0.0 < split_frac < 1.0:
        raise InvalidFraction(f"split_frac must lie in (0, 1), got {split_frac}")
    if not 0.0 <= heterogeneity <= 1.0:
        raise InvalidFraction(f"heterogeneity must lie in [0, 1], got {heterogeneity}")
    out = []
    for i in range(graph.n_clients):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA7A, i]))
        z = rng.standard_normal((n_per_client, spec.latent_dim))
        y = np.argmax(z @ spec.label_weights.T, axis=1)
        x = {}
        for k in graph.modality_sets[i]:
            a = spec.modality_projections[k]
            rot = client_rotation(a.shape[0], heterogeneity, spec.seed, i, k)
            clean = z @ (rot @ a).T
            x[k] = clean + spec.noise_std * rng.standard_normal(clean.shape)
        perm = rng.permutation(n_per_client)
        n_train = min(max(1, int(split_frac * n_per_client)), n_per_client - 1)
        out.append(ClientDataset(i, x, y, np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return out


def occlude(ds: ClientDataset, modality: int, frac: float) -> ClientDataset:
    """Zero the leading ``floor(frac * m_k)`` coordinates of one modality."""
    if not 0.0 <= frac <= 1.0:
        raise InvalidFraction(f"frac must lie in [0, 1], got {frac}")
    if modality not in ds.x:
        raise ModalityAbsent(f"client {ds.client} has no modality {modality}")
    x = dict(ds.x)
    arr = x[modality].copy()
    arr[:, : int(np.floor(frac * arr.shape[1]))] = 0.0
    x[modality] = arr
    return replace(ds, x=x)


def export_csv(datasets: Sequence[ClientDataset], out_dir: str) -> list[str]:
    """One CSV per client and modality plus a labels file per client."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for ds in datasets:
        split = np.full(ds.y.size, "train", dtype=object)
        split[ds.test_idx] = "test"
        for k, arr in sorted(ds.x.items()):
            path = os.path.join(out_dir, f"client{ds.client}_modality{k}.csv")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"x{c}" for c in range(arr.shape[1])])
                w.writerows([[repr(float(v)) for v in row] for row in arr])
            paths.append(path)
        path = os.path.join(out_dir, f"client{ds.client}_labels.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "split"])
            w.writerows(zip(ds.y.tolist(), split.tolist()))
        paths.append(path)
    return paths
