"""tokenfuse: a desk-scale toolkit for joint speech+text token modeling.

Pipeline: log-mel frontend -> k-means audio tokens -> joint vocabulary and
task tags -> embedding surgery on a text-only checkpoint -> loss-masked
multi-task training -> decoding -> BLEU / WER / CER / ASR-BLEU evaluation.
"""

from .audio import (
    FrameFeatureSequence,
    FrontendConfig,
    Waveform,
    extract_features,
    invert_features,
    load_features,
    read_wav,
    save_features,
    write_wav,
)
from .quantizer import (
    AudioTokenSeq,
    Codebook,
    detokenize,
    distortion,
    load_codebook,
    save_codebook,
    tokenize,
    train_codebook,
)
from .vocab import (
    JointVocabulary,
    TaskTag,
    TrainingExample,
    build_joint_vocab,
    parse_stages,
    parse_tag_text,
    render_tag,
    serialize_example,
)
from .mixture import (
    DatasetRecord,
    MixtureComponent,
    MixtureSpec,
    build_stream,
    component_weights,
    derive_tasks,
    load_manifest,
    save_manifest,
)
from .model import (
    Checkpoint,
    DecodeOutput,
    ModelConfig,
    decode,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
    surgery,
)
from .training import (
    LRSchedule,
    OptimizerState,
    TrainConfig,
    gradient_check,
    loss,
    train,
)
from .metrics import EvalCorpus, asr_bleu, cer, corpus_bleu, error_rate, wer
from .synth import SynthLanguageSpec, generate_corpus, make_language_pair, oracle_transcriber

__version__ = "0.1.0"
