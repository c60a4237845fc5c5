"""One-off calibration for the acceptance-scale training run."""

import json
import sys
import time

import numpy as np

from codec_infill.checkpoint import load_checkpoint
from codec_infill.evaluate import masked_reconstruction_eval, sample_reconstruction_cases
from codec_infill.infer import SamplingConfig
from codec_infill.model import ModelConfig, TransformerDecoder, new_model
from codec_infill.synthcodec import ToyCodecConfig, gen_corpus
from codec_infill.train import SchedulerConfig, TrainConfig, train_loop

BASE_LR = float(sys.argv[1]) if len(sys.argv) > 1 else 3e-3
STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
OUT = sys.argv[3] if len(sys.argv) > 3 else "/tmp/calib"

codec = ToyCodecConfig()
corpus = gen_corpus(1100, (5, 20), codec, seed=2024, num_validation=100)
train_utts = [u for u in corpus if u.split == "train"]
val_utts = [u for u in corpus if u.split == "val"]
by_id = {u.id: u for u in corpus}

model_cfg = ModelConfig(text_vocab_size=codec.alphabet_size, dtype="float32")
state = new_model(model_cfg, seed=7)
tcfg = TrainConfig(batch_frame_budget=4096, total_steps=STEPS, seed=11, checkpoint_every=200)
scfg = SchedulerConfig(base_lr=BASE_LR)

t0 = time.time()
state, metrics = train_loop(train_utts, state, tcfg, scfg, run_dir=OUT)
t_train = time.time() - t0
print(f"TRAIN done {STEPS} steps in {t_train/60:.1f} min")
for i in (0, 49, 199, 399, 799, 1199, 1599, 1999):
    if i < len(metrics):
        print(f"  step {metrics[i]['step']:5d} loss {metrics[i]['loss']:.4f} ({metrics[i]['loss_k']})")

cases = sample_reconstruction_cases(val_utts, np.random.default_rng(999), 100, max_span_symbols=5)
sampling = SamplingConfig(seed=5, max_generated_steps=60)

import glob
for path in sorted(glob.glob(f"{OUT}/ckpt_*.bin")):
    st, _ = load_checkpoint(path)
    if st.step % 400 != 0 and path.endswith("final.bin") is False and st.step != STEPS:
        continue
    decoder = TransformerDecoder(st)
    t1 = time.time()
    outcome = masked_reconstruction_eval(decoder, st.config, codec, by_id, cases, sampling)
    bad_len = sum(1 for r in outcome.cases if r["generated_frames"] != r["expected_frames"])
    print(
        f"EVAL step {st.step:5d}: region SER {outcome.region_error_rate:.4f} "
        f"intact {outcome.unedited_intact_count}/100 wrong-length {bad_len} "
        f"({time.time()-t1:.0f}s)"
    )
print("total", (time.time() - t0) / 60, "min")
