"""Sampler analysis tools.

ddim_histogram draws the same noise vectors through samplers of different
step counts and measures how far each truncated sampler's per-dimension
action distribution sits from the full-length reference.  kde_mode picks the
sample maximizing a Gaussian-kernel density, the mode-commitment summary used
when a point estimate is wanted from a multimodal sampler.
"""

from dataclasses import dataclass

import numpy as np

from ..diffusion import kde_mode
from ..errors import BadConfig

DDIM_STEP_COUNTS = (1, 2, 4, 100)
_SAMPLE_BATCH = 100


def sorted_l1_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Empirical 1-D transport distance between equal-size sample sets."""
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    if a.shape != b.shape:
        raise BadConfig("distance needs equal sample counts")
    return float(np.mean(np.abs(a - b)))


@dataclass
class HistogramResult:
    step_counts: tuple
    samples: dict        # step count -> (n, action_dim) first-action draws
    distances: dict      # step count -> (action_dim,) distance to reference

    @property
    def reference_steps(self) -> int:
        return max(self.step_counts)

    def mean_distance(self, steps: int) -> float:
        return float(np.mean(self.distances[steps]))

    def csv(self) -> str:
        dim = next(iter(self.samples.values())).shape[1]
        header = "steps,sample," + ",".join(f"a{d}" for d in range(dim))
        lines = [header]
        for s in self.step_counts:
            for i, row in enumerate(self.samples[s]):
                vals = ",".join(repr(float(v)) for v in row)
                lines.append(f"{s},{i},{vals}")
        return "\n".join(lines) + "\n"


def ddim_histogram(policy, obs: np.ndarray, n_samples: int = 1000,
                   step_counts=DDIM_STEP_COUNTS, seed: int = 0) -> HistogramResult:
    """Distribution of the first predicted action under different step counts.

    Every condition restarts from the same seed, so sample i shares its
    initial noise across conditions and the comparison is paired.  Distances
    are per-dimension transport distances to the largest step count.
    """
    steps = tuple(sorted(set(int(s) for s in step_counts)))
    if len(steps) < 2:
        raise BadConfig("need at least two step counts to compare")
    if n_samples < 2:
        raise BadConfig("need at least two samples")
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)

    samples = {}
    for s in steps:
        rng = np.random.default_rng(seed)
        rows = []
        done = 0
        while done < n_samples:
            b = min(_SAMPLE_BATCH, n_samples - done)
            batch = np.repeat(obs[None, :], b, axis=0)
            chunks = policy.act_batch(batch, rng, n_steps=s)
            rows.append(np.asarray(chunks[:, 0, :], dtype=np.float64))
            done += b
        samples[s] = np.concatenate(rows, axis=0)

    ref = samples[steps[-1]]
    distances = {}
    for s in steps:
        distances[s] = np.array([sorted_l1_distance(samples[s][:, d], ref[:, d])
                                 for d in range(ref.shape[1])])
    return HistogramResult(step_counts=steps, samples=samples, distances=distances)


# kde_mode lives next to the samplers so policies can use it without a
# circular import; re-exported here as part of the analysis surface.
