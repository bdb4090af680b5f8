#!/usr/bin/env python3
"""Generate the bundled 500-doc mini corpus under data/mini/.

Ten skill--occupation topics with 50 courses each. Per topic the first 12
docs are occupation-specific (grade 2), the next 15 teach the skill
generically (grade 1), and the rest are off-topic or wrong-occupation
(grade 0). Synthetic embeddings place docs on a cone around their topic
axis with an angle that grows with the doc index, so dense retrieval order
inside a topic is exact and every query's pool contains its ideal top-10.

Everything is seeded; re-running reproduces identical files.
"""

from __future__ import annotations

import argparse
import json
from collections import Counter
from pathlib import Path

import numpy as np

import sys

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from skillrank.corpus import CourseDoc, strip_html, write_courses
from skillrank.dense import save_embeddings
from skillrank.encoder import EncoderConfig, Model, random_weights
from skillrank.metrics import Qrels, save_qrels
from skillrank.quant import save_model

TOPICS = [
    ("Python", "Data Analyst", "a high-level programming language for data work"),
    ("Excel", "Accountant", "spreadsheet software for calculations and reporting"),
    ("Customer Service", "Front Desk Employee", "handling guest requests and complaints"),
    ("Project Management", "Operations Manager", "planning and coordinating projects"),
    ("SQL", "Database Administrator", "query language for relational databases"),
    ("Public Speaking", "Sales Representative", "presenting confidently to audiences"),
    ("Graphic Design", "Marketing Specialist", "visual communication and layout"),
    ("Machine Learning", "Software Engineer", "statistical models that learn from data"),
    ("Negotiation", "Procurement Officer", "reaching agreements between parties"),
    ("Time Management", "Executive Assistant", "organizing tasks and schedules"),
]

PROVIDERS = ["udemy", "udemy", "udemy", "udemy_business", "edx", "udemy", "goodhabitz", "udemy", "udemy_business", "other"]
LEVELS = ["Beginner", "Intermediate", "Advanced", None]

SPECIFIC_TITLES = [
    "{skill} for {occ}",
    "Learn {skill} for {occ} roles",
    "Advanced {skill} for the modern {occ}",
    "{skill} bootcamp for {occ}s",
    "Practical {skill} projects for every {occ}",
    "{skill} essentials: a {occ} guide",
]
GENERIC_TITLES = [
    "{skill}",
    "{skill} for beginners",
    "Complete {skill} masterclass",
    "Introduction to {skill}",
    "{skill} fundamentals",
    "The {skill} crash course",
    "{skill} from zero to hero",
]
OFFTOPIC_TITLES = [
    "Mastering {other_skill} quickly",
    "{other_skill} in practice",
    "Creative thinking workshops",
    "Workplace safety essentials",
    "Digital wellbeing at work",
]

NOISE_SENTENCES = [
    "Join over 10,000 happy students!",
    "Comes with a 30 day money back guarantee.",
    '"Best course I ever took" - a recent review.',
    "Used by teams at well-known companies worldwide.",
    "Lifetime access and a certificate of completion.",
]


def build_description(skill: str, occ: str, grade: int, rng: np.random.Generator) -> str:
    lead = {
        2: f"<p>This hands-on course teaches <b>{skill}</b> in the daily context of a {occ}. "
           f"You will practice {skill.lower()} on realistic {occ.lower()} tasks.</p>",
        1: f"<p>A general course about <b>{skill}</b>. Start from the basics and build up "
           f"your {skill.lower()} knowledge step by step.</p>",
        0: "<p>An online course to broaden your professional skills.</p>",
    }[grade]
    body = "<ul>" + "".join(
        f"<li>Module {i + 1}: {skill if grade else 'general'} topic {i + 1}</li>"
        for i in range(int(rng.integers(2, 6)))
    ) + "</ul>"
    noise = " ".join(
        NOISE_SENTENCES[int(j)] for j in rng.choice(len(NOISE_SENTENCES), size=int(rng.integers(1, 4)), replace=False)
    )
    filler = " ".join("Extra detail sentence number %d." % (i + 1) for i in range(int(rng.integers(0, 30))))
    return strip_html(f"{lead}{body}<p>{noise}</p><p>{filler}</p>")


def make_docs(rng: np.random.Generator) -> tuple[list[CourseDoc], Qrels]:
    docs: list[CourseDoc] = []
    qrels = Qrels()
    for t, (skill, occ, _desc) in enumerate(TOPICS):
        for i in range(50):
            doc_id = f"c{t * 50 + i:03d}"
            if i < 12:
                grade = 2
                title = SPECIFIC_TITLES[i % len(SPECIFIC_TITLES)].format(skill=skill, occ=occ)
            elif i < 27:
                grade = 1
                title = GENERIC_TITLES[(i - 12) % len(GENERIC_TITLES)].format(skill=skill)
            else:
                grade = 0
                if i % 3 == 0:  # teaches the skill, but for a different occupation
                    other_occ = TOPICS[(t + 3) % len(TOPICS)][1]
                    title = f"{skill} for {other_occ}"
                else:
                    other_skill = TOPICS[(t + 1) % len(TOPICS)][0]
                    title = OFFTOPIC_TITLES[i % len(OFFTOPIC_TITLES)].format(other_skill=other_skill)
            description = build_description(skill, occ, grade, rng)
            summaries = {
                "longt5": f"A course on {title.lower()}. Covers the core of "
                          f"{skill.lower() if grade else 'general workplace skills'} in short lessons.",
            }
            if i % 5 != 0:  # partial coverage on purpose
                summaries["vicuna"] = (
                    f"{title}: concise training on "
                    f"{(skill + ' for ' + occ).lower() if grade == 2 else (skill.lower() if grade else 'professional development')}."
                )
            rating = None if i % 9 == 0 else round(float(rng.uniform(2.5, 5.0)), 1)
            docs.append(
                CourseDoc(
                    id=doc_id,
                    provider=PROVIDERS[i % len(PROVIDERS)],
                    title=title,
                    description=description,
                    summaries=summaries,
                    level=LEVELS[i % len(LEVELS)],
                    rating=rating,
                    url=f"https://courses.example.com/{doc_id}",
                )
            )
            qrels.add(f"q{t}", doc_id, grade)
    return docs, qrels


def make_embeddings(rng: np.random.Generator, dim: int = 32):
    """Doc i of topic t sits at angle theta_i from the topic axis, with the
    off-axis component in the noise subspace (dims 10..31), so cosine order
    within a topic is exactly the doc index order."""
    doc_ids, doc_vectors = [], []
    for t in range(len(TOPICS)):
        for i in range(50):
            theta = 0.15 + 0.018 * i
            noise = np.zeros(dim)
            noise[len(TOPICS):] = rng.standard_normal(dim - len(TOPICS))
            noise /= np.linalg.norm(noise)
            vec = np.zeros(dim)
            vec[t] = np.cos(theta)
            vec += np.sin(theta) * noise
            doc_ids.append(f"c{t * 50 + i:03d}")
            doc_vectors.append(np.round(vec, 6))
    query_ids = [f"q{t}" for t in range(len(TOPICS))]
    query_vectors = [np.eye(dim)[t] for t in range(len(TOPICS))]
    return doc_ids, np.array(doc_vectors), query_ids, np.array(query_vectors)


def make_vocab(docs: list[CourseDoc], max_words: int = 1500) -> list[str]:
    counts: Counter[str] = Counter()
    for doc in docs:
        for text in (doc.title, doc.description, *doc.summaries.values()):
            counts.update(text.lower().split())
    for skill, occ, desc in TOPICS:
        counts.update(f"query document title description {skill} for {occ} {desc}".lower().split())
    return [w for w, _ in sorted(counts.most_common(max_words), key=lambda kv: (-kv[1], kv[0]))]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "mini"))
    parser.add_argument("--seed", type=int, default=13)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    docs, qrels = make_docs(rng)
    write_courses(docs, out / "courses.jsonl")
    save_qrels(qrels, out / "qrels.txt")

    doc_ids, doc_vecs, query_ids, query_vecs = make_embeddings(rng)
    save_embeddings(out / "doc_embeddings.txt", doc_ids, doc_vecs)
    save_embeddings(out / "query_embeddings.txt", query_ids, query_vecs)

    with open(out / "queries.tsv", "w", encoding="utf-8") as fh:
        for t, (skill, occ, desc) in enumerate(TOPICS):
            fh.write(f"q{t}\t{skill}\t{occ}\t{desc}\n")

    vocab = make_vocab(docs)
    (out / "vocab.txt").write_text("\n".join(vocab) + "\n", encoding="utf-8")

    config = EncoderConfig(vocab_size=2048, d_model=64, n_layers=2, n_heads=4, d_ff=256)
    model = Model(config, random_weights(config, seed=args.seed))
    save_model(model, out / "weights.bin")

    config_json = {
        "courses": "courses.jsonl",
        "doc_embeddings": "doc_embeddings.txt",
        "query_embeddings": "query_embeddings.txt",
        "queries": "queries.tsv",
        "qrels": "qrels.txt",
        "weights": "weights.bin",
        "vocab": "vocab.txt",
        "vocab_size": 2048,
        "scheme": "dynamic",
        "rerank": {"depth": 20, "max_input_len": 256, "variant": "summary:longt5"},
        "first_stage": "dense",
        "top_n": 10,
        "event_store": "stores/events.jsonl",
        "preference_store": "stores/preferences.jsonl",
    }
    (out / "pipeline.conf").write_text(json.dumps(config_json, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(docs)} docs, {len(qrels.queries())} queries to {out}")


if __name__ == "__main__":
    main()
