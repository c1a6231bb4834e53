"""Fixed 10-item 2PL table used by the default simulation mode.

The table was drawn once with `simgen.gen_item_params(np.random.default_rng(
GENERATOR_SEED))` and frozen here so every replication measures the latent
running variable with the same instrument. Under this table the marginal
probability of an individual summed score at or below the cutoff 4 is 0.398
(about 40% treated under the multisite rule) and the cluster-average score for
30-individual clusters has standard deviation close to 1.

`scripts/make_item_table.py` regenerates and verifies these constants.
"""

from __future__ import annotations

import numpy as np

from .measurement import MeasurementParams

GENERATOR_SEED = 51

_SLOPES = (
    1.2031917698086005,
    1.1919375027337138,
    1.371700154385506,
    1.734110271312741,
    1.265187934168913,
    1.0829309941197531,
    1.150564830525384,
    1.9260864967655091,
    1.2584968438008752,
    1.065319748211621,
)

_INTERCEPTS = (
    -1.815447982322084,
    -0.3420973905924926,
    -0.4115126593166443,
    1.1775137546874364,
    1.310271474427744,
    -1.7118643753737355,
    1.7462309350941476,
    1.1944156954217444,
    1.443328637438042,
    -1.5379964247214613,
)


def fixed_item_params() -> MeasurementParams:
    """The frozen item table as measurement parameters."""
    return MeasurementParams(np.array(_SLOPES), np.array(_INTERCEPTS))
