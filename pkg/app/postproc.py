import logging
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from app.runtime import ConfigError
from app.volume import SegVolume

log = logging.getLogger(__name__)

MIN_COMPONENT_VOXELS = 10
ET_MIN_VOXELS = 500
ET_LABEL = 4
NCR_LABEL = 1

connectivity_rank = {6: 1, 18: 2, 26: 3}


class ComponentLabeling(NamedTuple):
    ids: npt.NDArray[np.int32]
    """0 is background, components are 1..count"""
    sizes: npt.NDArray[np.int64]
    """sizes[k - 1] is the voxel count of component k"""

    @property
    def count(self):
        return len(self.sizes)


def connected_components(mask: npt.NDArray[np.bool_], connectivity: int = 26) -> ComponentLabeling:
    try:
        structure = ndimage.generate_binary_structure(3, connectivity_rank[connectivity])
    except KeyError:
        raise ConfigError(f"Connectivity must be 6, 18 or 26, got {connectivity}") from None
    ids, count = ndimage.label(mask, structure=structure)
    sizes = np.bincount(ids.ravel(), minlength=count + 1)[1:]
    return ComponentLabeling(ids.astype(np.int32), sizes.astype(np.int64))


def remove_small_components(seg: SegVolume, min_voxels: int = MIN_COMPONENT_VOXELS, connectivity: int = 26):
    """Zeroes whole-tumor components smaller than min_voxels"""
    components = connected_components(seg.data > 0, connectivity)
    small = np.flatnonzero(components.sizes < min_voxels) + 1
    if not small.size:
        return seg
    data = seg.data.copy()
    data[np.isin(components.ids, small)] = 0
    log.debug("removed %d components under %d voxels", small.size, min_voxels)
    return seg.with_data(data)


def enforce_et_threshold(seg: SegVolume, threshold: int = ET_MIN_VOXELS):
    """Fewer than threshold enhancing voxels in the whole case are taken as necrosis"""
    et = seg.data == ET_LABEL
    count = int(et.sum())
    if count == 0 or count >= threshold:
        return seg
    data = seg.data.copy()
    data[et] = NCR_LABEL
    log.debug("relabelled %d enhancing voxels as necrosis", count)
    return seg.with_data(data)


def postprocess(
    seg: SegVolume,
    min_voxels: int = MIN_COMPONENT_VOXELS,
    et_threshold: int = ET_MIN_VOXELS,
    connectivity: int = 26,
):
    return enforce_et_threshold(remove_small_components(seg, min_voxels, connectivity), et_threshold)
