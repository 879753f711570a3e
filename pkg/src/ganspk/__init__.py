"""Domain-invariant speaker embeddings trained with adversarial domain games."""

from .autodiff import NonFiniteError, ShapeError, Value
from .evaluation import (EmbeddingTable, ProbeConfig, Score, Trial, compute_eer, domain_probe,
                         extract, fuse, make_trials, score_trials)
from .losses import (AmSoftmaxConfig, GanVariant, am_softmax_loss, aux_classifier_loss,
                     discriminator_loss, generator_loss)
from .network import ModelState, NetworkConfig, SpeakerBatch, encode, init_model
from .synthdata import Corpus, Recording, SynthSpec, generate, read_corpus, write_corpus
from .trainer import TrainerConfig, TrainHistory, adversarial_step, build_epoch_plan, pretrain, train

__version__ = "0.1.0"
