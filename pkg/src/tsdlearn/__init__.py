"""Target sound detection with mixed supervision.

A frame-supervised student and a clip-supervised student teach each other
across a labeled source domain and a weakly-labeled target domain: the frame
student distills its features into the clip student, the clip student hands
back soft pseudo labels, and a domain discriminator behind a gradient
reversal layer keeps the learned features domain-invariant.
"""

from .dataset import (
    Catalog,
    DatasetConfig,
    EventList,
    FrameLabels,
    SampleRecord,
    SupervisionLeakError,
    TSDSample,
    build_dataset,
    corrupt_labels,
    frame_labels_from_events,
    load_tsd_samples,
    make_tsd_samples,
    paired_probe_scenes,
    read_manifest,
    split_source_target,
    synthesize_scene,
    write_manifest,
)
from .evaluation import (
    DecodeConfig,
    EvalReport,
    decode_events,
    evaluate,
    event_counts,
    event_f,
    f_score,
    macro_average,
    pseudo_error_rate,
    segment_counts,
    segment_f,
    write_report_csv,
)
from .features import (
    DEFAULT_MEL,
    MelConfig,
    MelSpectrogram,
    Waveform,
    frames_for_duration,
    load_audio,
    mel_spectrogram,
    save_audio,
    time_of_frame,
)
from .losses import (
    adversarial_objective,
    clip_bce,
    domain_loss,
    frame_bce,
    kd_loss,
    pseudo_loss,
    w_kd_loss,
)
from .models import (
    ConditionalNet,
    DomainDiscriminator,
    StudentModel,
    conditional_embed,
    detect_frames,
    grad_reverse,
    linsoft_pool,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    EmbeddingCache,
    IterationRecord,
    PhaseResult,
    TrainConfig,
    TwoStudentResult,
    discriminator_holdout_accuracy,
    evaluate_student,
    generate_pseudo_labels,
    iterate_two_students,
    noise_robustness_experiment,
    retrain_f_on_pseudo,
    retrain_w_on_target,
    run_full_pipeline,
    train_conditional,
    train_domain_probe,
    train_f_on_source,
    train_phase,
    train_strong_baseline,
    train_w_on_source_with_kd,
    train_weak_baseline,
)

__version__ = "0.1.0"
