"""Python interface to the transrad radar detector."""

from ._transrad import (
    Annotation3D,
    ConfigError,
    DataError,
    Detection,
    Detector,
    GenerationError,
    alignment_metric,
    annotation_from_box,
    average_precision,
    axial_decay_matrices,
    center_loss,
    ciou_loss,
    class_nms,
    compute_class_weights,
    dfl_decode,
    dfl_loss,
    focal_loss,
    iou_2d,
    iou_3d,
    la_nms,
    load_frames,
    lr_at,
    mean_ap,
    rescale_annotation,
    resize_doppler,
    resolve_config,
    save_frames,
    smooth_l1,
    spatial_decay_matrix,
    synth_frame,
    temporal_decay_matrix,
)

__all__ = [name for name in dir() if not name.startswith("_")]
