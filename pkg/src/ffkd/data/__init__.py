from .io import (
    FormatError,
    annotation_from_dict,
    annotation_to_dict,
    load_annotation,
    load_manifest,
    make_splits,
    parse_pnm,
    read_pnm,
    save_annotation,
    validate_annotation,
    write_pnm,
    write_split,
)
from .synth import (
    CLASS_NAMES,
    AnnotationSet,
    MultiModalFrame,
    SceneSpec,
    frame_rng,
    generate_scene,
    generate_split,
    sample_annotations,
    sample_count,
    shape_mask,
)

__all__ = [
    "CLASS_NAMES", "AnnotationSet", "FormatError", "MultiModalFrame", "SceneSpec",
    "annotation_from_dict", "annotation_to_dict", "frame_rng",
    "generate_scene", "generate_split", "load_annotation", "load_manifest", "make_splits",
    "parse_pnm", "read_pnm", "sample_annotations", "sample_count", "save_annotation", "shape_mask",
    "validate_annotation", "write_pnm", "write_split",
]
