#!/usr/bin/env python3
"""Generate the bundled synthetic legal corpus and classification tasks.

Writes into data/synthetic/ (or --out):
  pretrain/doc_NNN.txt       legal-flavoured pre-training documents
  classify/{train,test}.jsonl  two-keyword task: "alpha" -> A, "beta" -> B
  classify/labels.txt
  choice/{train,test}.jsonl  5-choice task: the correct choice repeats the
                             context keyword
  tiny.cfg                   tiny-preset settings for the smoke pipeline

The output is a pure function of --seed.
"""

import argparse
import json
import random
from pathlib import Path

PARTIES = ["the Buyer", "the Seller", "the Licensee", "the Licensor", "the Company", "the Employee",
           "the Contractor", "the Landlord", "the Tenant", "the Borrower", "the Lender", "each Party"]
VERBS = ["shall indemnify", "shall notify", "may terminate", "shall deliver", "shall pay", "shall not assign",
         "agrees to reimburse", "shall maintain", "may audit", "shall cooperate with"]
OBJECTS = ["all reasonable expenses", "written notice", "the Confidential Information", "the Purchase Price",
           "any amounts due", "the Premises", "the Services", "the Intellectual Property", "the Collateral",
           "all records and books of account"]
QUALIFIERS = ["within thirty (30) days", "upon written request", "in accordance with Section 4.2",
              "without undue delay", "to the extent permitted by applicable law", "at its sole expense",
              "prior to the Closing Date", "during the Term of this Agreement"]
HEADINGS = ["Governing Law", "Indemnification", "Termination", "Confidentiality", "Assignment", "Notices",
            "Severability", "Entire Agreement", "Force Majeure", "Warranties", "Payment Terms", "Arbitration"]
COURT = ["The district court granted summary judgment", "The court of appeals reversed", "We affirm the judgment",
         "The petitioner argues that the statute is ambiguous", "The respondent contends that the claim is barred",
         "The jury returned a verdict for the plaintiff", "The trial court abused its discretion"]
REASONS = ["because the contract was unambiguous", "since no genuine dispute of material fact existed",
           "as the limitations period had expired", "because the defendant waived the defense",
           "given the plain meaning of the text", "in light of the legislative history"]

FILLER = ["the parties", "agreed", "that", "the", "notice", "was", "delivered", "under", "this", "agreement",
          "court", "held", "payment", "clause", "term", "of", "contract", "and", "shall", "apply"]

KEYWORDS = ["arbitration", "indemnity", "warranty", "severability", "assignment", "termination", "insurance",
            "confidentiality", "jurisdiction", "remedies", "waiver", "notices", "amendment", "taxes",
            "compliance", "publicity", "employment", "licensing", "audit", "escrow"]


def clause(rng):
    s = f"{rng.choice(PARTIES)} {rng.choice(VERBS)} {rng.choice(OBJECTS)} {rng.choice(QUALIFIERS)}."
    return s[0].upper() + s[1:]


def contract(rng, n):
    parts = [f"AGREEMENT No. {rng.randint(1000, 9999)}"]
    for i in range(n):
        parts.append(f"\n{i + 1}. {rng.choice(HEADINGS)}.")
        parts.append(" ".join(clause(rng) for _ in range(rng.randint(2, 5))))
    return "\n".join(parts) + "\n"


def opinion(rng, n):
    paras = []
    for _ in range(n):
        paras.append(" ".join(f"{rng.choice(COURT)} {rng.choice(REASONS)}." for _ in range(rng.randint(2, 4))))
    return f"Case No. {rng.randint(10, 99)}-{rng.randint(1000, 9999)}\n\n" + "\n\n".join(paras) + "\n"


def filler(rng, n):
    return [rng.choice(FILLER) for _ in range(n)]


def keyword_example(rng, label):
    words = filler(rng, rng.randint(5, 10))
    words.insert(rng.randint(0, len(words)), "alpha" if label == "A" else "beta")
    return {"text": " ".join(words), "label": label}


def choice_example(rng):
    keys = rng.sample(KEYWORDS, 5)
    answer = rng.randrange(5)
    context = f"This section concerns {keys[answer]} and the related obligations."
    choices = [f"the {k} clause governs" for k in keys]
    return {"context": context, "choices": choices, "answer": answer}


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


TINY_CFG = """# Tiny preset for the bundled smoke pipeline.
preset = tiny
vocab_size = 512
max_seq_len = 256
total_steps = 500
batch_size = 8
seq_len = 128
lr_max = 1e-3
lr_min = 1e-4
warmup_steps = 50
clip_norm = 1.0
seed = 1
checkpoint_every = 250
log_every = 1
"""

FINETUNE_CFG = """# Classifier fine-tuning on the two-keyword task.
total_steps = 150
batch_size = 16
seq_len = 64
lr_max = 1e-3
lr_min = 1e-4
warmup_steps = 15
clip_norm = 1.0
seed = 1
checkpoint_every = 1000
log_every = 1
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data" / "synthetic")
    ap.add_argument("--seed", type=int, default=20221)
    ap.add_argument("--documents", type=int, default=80)
    args = ap.parse_args()
    rng = random.Random(args.seed)

    pre = args.out / "pretrain"
    pre.mkdir(parents=True, exist_ok=True)
    for i in range(args.documents):
        text = contract(rng, rng.randint(6, 14)) if i % 3 else opinion(rng, rng.randint(4, 9))
        (pre / f"doc_{i:03d}.txt").write_text(text)

    cls = args.out / "classify"
    cls.mkdir(parents=True, exist_ok=True)
    for name, n in (("train", 200), ("test", 50)):
        write_jsonl(cls / f"{name}.jsonl", [keyword_example(rng, "A" if j % 2 == 0 else "B") for j in range(n)])
    (cls / "labels.txt").write_text("A\nB\n")

    mc = args.out / "choice"
    mc.mkdir(parents=True, exist_ok=True)
    for name, n in (("train", 200), ("test", 50)):
        write_jsonl(mc / f"{name}.jsonl", [choice_example(rng) for _ in range(n)])

    (args.out / "tiny.cfg").write_text(TINY_CFG)
    (args.out / "finetune.cfg").write_text(FINETUNE_CFG)


if __name__ == "__main__":
    main()
