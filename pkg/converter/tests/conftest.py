import numpy as np
import pytest
from bodyfit.bodymodel import make_toy_model


def archive_fields(assets, flatten_pose=False, kintree=True):
    """Source-archive dict for a toy model under the published names."""
    parents = assets.parents.astype(np.int64)
    pose = assets.pose_dirs.numpy()
    if flatten_pose:
        pose = pose.transpose(2, 0, 1).reshape(pose.shape[2], -1)
    fields = {
        "v_template": assets.template.numpy(),
        "shapedirs": assets.shape_dirs.numpy(),
        "exprdirs": assets.expr_dirs.numpy(),
        "posedirs": pose,
        "J_regressor": assets.joint_regressor.numpy(),
        "weights": assets.skin_weights.numpy(),
        "f": assets.faces.astype(np.int64),
        "joint_labels": np.array(list(assets.joint_labels)),
    }
    if kintree:
        table = np.stack([parents, np.arange(len(parents))])
        fields["kintree_table"] = table.astype(np.uint32)
    else:
        fields["parents"] = parents
    return fields


@pytest.fixture(scope="session")
def toy():
    return make_toy_model(60, 5, 1)


@pytest.fixture()
def toy_npz(toy, tmp_path):
    path = tmp_path / "toy_source.npz"
    np.savez(path, **archive_fields(toy))
    return path
