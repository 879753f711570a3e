# %% [markdown]
# # Adversarial adaptation on one seed
#
# Pretrain a speaker embedding on the labeled source domain, then run each
# adversarial variant from that starting point and compare verification EER
# and how much domain information the embeddings still carry. This takes
# about a minute on one core.

# %%
import logging

from ganspk import experiment

logging.basicConfig(level=logging.INFO, format="%(message)s")
cfg = experiment.ExperimentConfig()
result = experiment.run_seed(cfg, seed=0)

# %%
print(experiment.format_table(experiment.summary_rows([result])))

# %% [markdown]
# The probe column is the held-out accuracy of a fresh classifier predicting
# the domain from embeddings of unseen speakers: 0.5 would mean the domains
# are indistinguishable.

# %% [markdown]
# The same pipeline runs from the shell, one step per command:
#
# ```
# ganspk gen-data --run run --seed 0
# ganspk pretrain --run run
# ganspk train --run run --variant lsgan
# ganspk extract --run run --model run/lsgan.asem
# ganspk score --run run --embeddings run/lsgan.emb
# ganspk report --run run
# ```
