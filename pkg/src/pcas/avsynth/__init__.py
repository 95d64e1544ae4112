from .audio import (
    FbankConfig,
    FbankFeatures,
    class_frequency,
    compute_fbank,
    log_mel,
    mel_filterbank,
    mel_points,
    stft_magnitude,
    synth_audio,
)
from .dataset import (
    CLASS_NAMES,
    DatasetExistsError,
    DatasetManifest,
    GenConfig,
    TrainClip,
    child_seed,
    generate_dataset,
    load_split,
    sample_scene,
)
from .scene import SceneError, SceneObject, SceneSpec, render_scene
