"""Shared builders for synthetic training/eval samples used across tests."""

import numpy as np

from bodyfit.bodymodel import BodyParams, lbs_forward
from bodyfit.landmarks import extract_landmarks
from bodyfit.pointcloud import TriMesh, normalize_unit, sample_surface

from conftest import random_params


def landmark_samples(assets, spec, count, seed=0, n_points=2048):
    """(points, targets) pairs: posed toy bodies with exact landmarks."""
    samples = []
    for i in range(count):
        params = random_params(assets, seed * 10_000 + i)
        verts, _ = lbs_forward(assets, params)
        cloud = sample_surface(TriMesh(verts, assets.faces), n_points, seed=seed * 10_000 + i)
        samples.append((cloud.points, extract_landmarks(verts, spec)))
    return samples


def disambiguation_samples(assets, spec, count=20, seed=0, n_points=256,
                           delta=0.05, image_size=32):
    """Samples whose targets differ only by a +-delta shift along x that
    is withheld from the points and encoded solely in the image's red
    channel. Any point-only model is floored at loss delta^2."""
    params = BodyParams.zeros(assets)
    verts, _ = lbs_forward(assets, params)
    cloud = sample_surface(TriMesh(verts, assets.faces), n_points, seed=seed)
    base_targets = extract_landmarks(verts, spec)
    samples = []
    for i in range(count):
        sign = 1.0 if i % 2 == 0 else -1.0
        tgt = base_targets.copy()
        tgt[:, 0] += sign * delta
        image = np.zeros((image_size, image_size, 3), dtype=np.float32)
        image[..., 0] = 0.75 if sign > 0 else 0.25
        samples.append((cloud.points, tgt, image))
    return samples


CUE_AMPLITUDE = 0.35  # head bulge fraction at the size range's ends


def sized_body(assets, u, seed=0, n_points=1024, rng=None, pose_scale=0.0):
    """A toy body of known physical size (requires a size_mode model).

    u in [0, 1] sweeps sizes S log-uniformly over [0.5, 2.0]. The head
    bulge coefficient moves linearly with u, so the proportion cue left
    after normalization is equally strong across the whole range; small
    bodies get the bulged head (a dent sheds surface points exactly where
    relative accuracy is hardest, so the bulge goes to the end that needs
    the signal). Size itself is dialed in exactly through the
    uniform-growth mode: the shape family is closed under uniform
    scaling, so rescaling the body to the target extent is a closed-form
    coefficient update. Returns (metric cloud, params), where the params
    reproduce the scaled mesh.
    """
    cue = CUE_AMPLITUDE * (1.0 - 2.0 * u)
    params = BodyParams.zeros(assets)
    params.beta[1] = cue
    if rng is not None:
        params.beta[2:] = rng.uniform(-0.3, 0.3, size=params.beta.shape[0] - 2)
        if pose_scale > 0.0:
            params.theta = rng.uniform(-pose_scale, pose_scale, size=params.theta.shape)
    verts, _ = lbs_forward(assets, params)
    center = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    extent = np.abs(verts - center).max()
    target = 0.9 * 0.5 * 4.0**u
    k = target / extent
    # pose correctives do not rescale, so with pose_scale > 0 the final
    # extent lands only near the target; the default posed-at-rest path
    # hits it exactly
    params.beta *= k
    params.beta[0] = k - 1.0
    verts, _ = lbs_forward(assets, params)
    cloud = sample_surface(TriMesh(verts, assets.faces), n_points, seed=seed)
    return cloud, params


def scale_samples(assets, count, seed=0, n_points=1024, clones=1, balance=0.0):
    """(normalized cloud, true scale) pairs over sizes in [0.5, 2.0].

    Sizes are stratified over the range so small sets still cover both
    ends. ``clones`` resamples each body's surface that many times under
    different seeds; the repeated targets teach the regressor to ignore
    the point-sampling noise instead of memorizing it. ``balance`` > 0
    adds extra repeats of small sizes (scaled by (2/S)**balance, never
    dropping any body below ``clones``): squared-error training weights
    sizes absolutely, so evening out per-size relative accuracy needs
    the small end repeated more often."""
    rng = np.random.default_rng(seed)
    us = [(i + rng.uniform()) / count for i in range(count)]
    if balance > 0.0:
        raw = [(2.0 / (0.5 * 4.0**u)) ** balance for u in us]
        norm = sum(raw) / len(raw)
        reps = [max(clones, round(clones * r / norm)) for r in raw]
    else:
        reps = [clones] * count
    samples = []
    for i, u in enumerate(us):
        for c in range(reps[i]):
            cloud, _ = sized_body(assets, u, seed=seed * 100_000 + i * clones + c,
                                  n_points=n_points)
            normalized, _, inv_scale = normalize_unit(cloud)
            samples.append((normalized, inv_scale))
    return samples
