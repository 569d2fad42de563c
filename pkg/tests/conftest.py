import numpy as np
import pytest

from regimefolio.dataio import FeatureMatrix, ReturnPanel


@pytest.fixture
def small_panel():
    return ReturnPanel(
        years=[2000, 2001, 2002, 2003, 2004, 2005, 2006, 2007],
        asset_names=["A", "B"],
        returns=np.array([
            [0.10, 0.02], [0.05, 0.01], [-0.08, 0.03], [0.12, 0.02],
            [0.03, 0.01], [-0.02, 0.04], [0.07, 0.02], [0.09, 0.03],
        ]),
    )


def feature_matrix(values, names=None, start_year=2000):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if names is None:
        names = [f"f{i}" for i in range(values.shape[1])]
    return FeatureMatrix(
        years=list(range(start_year, start_year + values.shape[0])),
        feature_names=names,
        values=values,
    )


@pytest.fixture
def two_cluster_features():
    rng = np.random.default_rng(7)
    a = rng.normal([0.0, 0.0], 0.5, size=(30, 2))
    b = rng.normal([10.0, 10.0], 0.5, size=(30, 2))
    values = np.vstack([a, b])
    labels = np.array([0] * 30 + [1] * 30)
    order = rng.permutation(60)
    return feature_matrix(values[order]), labels[order]
