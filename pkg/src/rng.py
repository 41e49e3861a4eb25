"""Named random sub-streams derived from one experiment seed."""
import numpy as np

# Stable ids: reordering or renaming entries changes every trace.
STREAM_IDS = {
    "partition": 1,
    "synthetic_data": 2,
    "model_training": 3,
    "node_draw": 4,
    "client_selection": 5,
    "baseline": 6,
}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return the generator for sub-stream ``name`` of experiment ``seed``.

    Extra integers (e.g. a model index) split a stream further. The same
    arguments always give a generator in the same state.
    """
    if name not in STREAM_IDS:
        raise KeyError(f"unknown random stream '{name}'")
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAM_IDS[name], *map(int, extra)))
    return np.random.default_rng(sequence)
