"""Instrument embeddings from raw audio: learnable sinc front-end, ResNet
encoder with LDE pooling, A-softmax training, verification scoring and
probing."""

from .data import (AudioSample, Manifest, ManifestRecord, ToyCorpusSpec, generate_toy_corpus,
                   synth_toy_corpus)
from .encoder import EmbeddingExtractor, EncoderConfig, LDEPooling, ResNetEncoder, lde_pool
from .estimator import InstrumentEmbedder, check_waveforms
from .frontend import (FilterbankParams, SincFrontend, apply_frontend, init_filterbank,
                       mel_init, midi_init, sinc_kernel)
from .objective import (AngularSoftmaxHead, DualHead, SoftmaxHead, asoftmax_loss,
                        lambda_schedule, multitask_loss)
from .probing import (DecisionTreeProbe, MLPProbe, ProbeReport, f1_report, relative_improvement,
                      run_probes, split_probe)
from .training import ModelCheckpoint, TrainConfig, extract_embeddings, finetune, train
from .verification import (EERResult, ScoreSet, TrialSet, build_trials, compute_eer,
                           cosine_score, enroll, holm_bonferroni, pairwise_significance,
                           rocch_eer, score_trials, z_test)

__version__ = "0.1.0"
