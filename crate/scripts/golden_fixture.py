#!/usr/bin/env python3
"""Generate the golden fixture corpus and compute its expected metrics.

Writes crates/core/fixtures/golden/. The expected numbers in expected.json are
computed here from first principles (boolean evaluation over the documents,
label means, set intersections, field-by-field comparison) without running the
Rust code, so the Rust pipeline is checked against an independent oracle.

Usage: python3 scripts/golden_fixture.py [--check]
  --check  regenerate into memory and fail if the committed files differ.
"""

import argparse
import json
import random
import re
import sys
from datetime import date, timedelta
from pathlib import Path

SEED = 20240611
ROOT = Path(__file__).resolve().parent.parent
OUT = ROOT / "crates" / "core" / "fixtures" / "golden"
SEARCH_LIMIT = 3000
SCREENING_KS = (10, 20)
CANDIDATES = 50
LABEL_SCORE = {"YES": 1.0, "PARTIAL": 0.5, "Partially Yes": 0.5, "UNCERTAIN": 0.0, "NO": -1.0}

FILLER = (
    "randomized trial cohort outcome analysis follow baseline adverse events observed primary secondary "
    "measured participants weeks months dose placebo controlled open label multicenter clinical"
).split()


def tokens(text):
    return [t.lower() for t in re.split(r"[^A-Za-z0-9]+", text) if t]


def word(rng, prefix):
    syll = ["ka", "lo", "mi", "nu", "ro", "sa", "te", "vi", "zo", "pe", "qu", "da"]
    return prefix + "".join(rng.choice(syll) for _ in range(3))


class Gen:
    def __init__(self):
        self.rng = random.Random(SEED)
        self.publications = {}
        self.reviews = []
        self.candidates = {}
        self.extraction = []
        self.responses = {"search": {}, "screening": {}, "char_extract": {}, "arm_extract": {},
                          "participant_extract": {}, "result_extract": {}}
        self.next_pmid = 31000000
        self.used_words = set()

    def fresh(self, prefix):
        while True:
            w = word(self.rng, prefix)
            if w not in self.used_words:
                self.used_words.add(w)
                return w

    def pmid(self):
        self.next_pmid += 1
        return str(self.next_pmid)

    def add_pub(self, title, abstract, when, full_text=None):
        pid = self.pmid()
        rec = {"citation_id": pid, "title": title, "abstract": abstract, "publication_date": when.isoformat()}
        if full_text:
            rec["full_text"] = full_text
        self.publications[pid] = rec
        return pid

    def filler(self, n):
        return " ".join(self.rng.choice(FILLER) for _ in range(n))

    def build(self):
        truth_counts = [4, 7, 12, 6, 17]
        for r in range(5):
            self.build_review(r, truth_counts[r])
        for _ in range(150):
            when = date(2000, 1, 1) + timedelta(days=self.rng.randrange(0, 8000))
            self.add_pub("Background study " + self.filler(4), self.filler(30), when)
        for r in self.reviews:
            for cid in sorted(r["included_study_ids"])[:3]:
                self.build_extraction(r, cid)

    def build_review(self, r, n_truth):
        rng = self.rng
        rid = f"R{r + 1:02d}"
        review_date = date(2019, 1, 1) + timedelta(days=rng.randrange(0, 700))
        pop = [self.fresh("p"), self.fresh("p")]
        itv = [self.fresh("i"), self.fresh("i"), self.fresh("i")]
        comp = self.fresh("c")
        outc = self.fresh("o")
        pico = {"population": f"adults with {pop[0]} disease", "intervention": f"{itv[0]} therapy",
                "comparison": f"{comp} placebo"}
        if r != 2:
            pico["outcome"] = f"{outc} score"
        # Query: OR of population terms AND OR of intervention terms; one
        # intervention term has two tokens that must both occur.
        p_terms = [pop[0], pop[1]]
        i_terms = [itv[0], f"{itv[1]} {itv[2]}"]

        def doc_text(match_p, match_i):
            parts = [self.filler(6)]
            if match_p:
                parts.append(rng.choice(p_terms))
            if match_i == "single":
                parts.append(itv[0])
            elif match_i == "pair":
                parts.append(f"{itv[1]} extended {itv[2]}")
            elif match_i == "half":
                parts.append(itv[1])
            parts.append(self.filler(6))
            return " ".join(parts)

        before = lambda: review_date - timedelta(days=rng.randrange(30, 5000))
        cands = []
        truth = []
        for k in range(n_truth):
            # Most included studies match the query; a few miss one facet.
            kind = rng.random()
            if kind < 0.75:
                text = doc_text(True, rng.choice(["single", "pair"]))
            elif kind < 0.9:
                text = doc_text(True, "half")
            else:
                text = doc_text(False, "single")
            full = None
            if k < 3:
                full = "Methods. " + self.filler(120)
            title = f"Trial of {itv[0]} in {pop[0]} {self.filler(2)}" if kind < 0.75 else f"Trial report {self.filler(3)}"
            pid = self.add_pub(title, text, before(), full)
            truth.append(pid)
            cands.append(pid)
        while len(cands) < CANDIDATES:
            m = rng.random()
            if m < 0.4:
                text = doc_text(True, rng.choice(["single", "pair", "half"]))
            elif m < 0.7:
                text = doc_text(rng.random() < 0.5, "none")
            else:
                text = doc_text(False, "single")
            cands.append(self.add_pub(f"Study {self.filler(3)}", text, before()))
        # Matching documents published after the review: outside the ceiling.
        for _ in range(6):
            after = review_date + timedelta(days=rng.randrange(1, 900))
            self.add_pub(f"Later trial {self.filler(2)}", doc_text(True, "single"), after)
        rng.shuffle(cands)
        self.candidates[rid] = cands
        self.reviews.append({
            "review_id": rid,
            "title": f"Review of {itv[0]} for {pop[0]}",
            "abstract": f"We reviewed trials of {itv[0]} in {pop[0]}.",
            "pico": pico,
            "included_study_ids": sorted(truth),
            "publication_date": review_date.isoformat(),
        })
        reply = json.dumps({"population": p_terms, "intervention": i_terms})
        if r == 1:
            self.responses["search"][rid] = ["I think the query should use the population terms.", reply]
        else:
            self.responses["search"][rid] = reply
        self.script_screening(rid, pico, cands, set(truth))
        self._query = (p_terms, i_terms)
        self.reviews[-1]["_query"] = (p_terms, i_terms)

    def script_screening(self, rid, pico, cands, truth):
        rng = self.rng
        ids = ["P1", "I1", "C1"] + (["O1"] if "outcome" in pico else [])
        for n, cid in enumerate(cands):
            if cid in truth:
                weights = [("YES", 6), ("Partially Yes", 2), ("UNCERTAIN", 1), ("NO", 1)]
            else:
                weights = [("YES", 2), ("PARTIAL", 2), ("UNCERTAIN", 2), ("NO", 4)]
            pool = [l for l, w in weights for _ in range(w)]
            labels = [rng.choice(pool) for _ in ids]
            reply = json.dumps({"assessments": [
                {"criterion_id": c, "label": l, "rationale": f"Criterion {c} judged {l.lower()} from the abstract."}
                for c, l in zip(ids, labels)
            ]})
            subject = f"{rid}/{cid}"
            if n % 17 == 3:
                self.responses["screening"][subject] = ["Looks eligible overall.", reply]
            elif n % 23 == 5:
                self.responses["screening"][subject] = ["no json here", "still none"]
            else:
                self.responses["screening"][subject] = reply

    def disjoint_text(self, n=2):
        return " ".join(self.fresh("w") for _ in range(n))

    def build_extraction(self, review, cid):
        rng = self.rng
        rid = review["review_id"]

        def text_or_wrong(gold_text):
            return gold_text if rng.random() < 0.7 else self.disjoint_text()

        def num_or_wrong(x):
            return x if rng.random() < 0.7 else x + rng.choice([1, 3, 7])

        # Study characteristics.
        fields = [
            {"name": "conditions", "value_kind": "list_of_text", "description": "Conditions studied"},
            {"name": "interventions", "value_kind": "list_of_text", "description": "Interventions studied"},
            {"name": "enrollment", "value_kind": "number", "description": "Participants enrolled"},
            {"name": "study_type", "value_kind": "text", "description": "Study type"},
        ]
        gold = {"conditions": [self.disjoint_text()], "interventions": [self.disjoint_text(1), self.disjoint_text(1)],
                "enrollment": rng.randrange(40, 2000), "study_type": "interventional"}
        pred = {"conditions": [text_or_wrong(gold["conditions"][0])],
                "interventions": gold["interventions"] if rng.random() < 0.7 else [self.disjoint_text()],
                "enrollment": num_or_wrong(gold["enrollment"]),
                "study_type": text_or_wrong("interventional")}
        if rng.random() < 0.3:
            pred["enrollment"] = f"{pred['enrollment']:,}"
        if rng.random() < 0.15:
            del pred["study_type"]
        case = f"{rid}-{cid}-characteristics"
        self.extraction.append({"case_id": case, "citation_id": cid, "review_id": rid,
                                "input": {"task": "study_characteristics", "fields": fields},
                                "gold": {"task": "study_characteristics", "record": gold}})
        self.responses["char_extract"][case] = "```json\n" + json.dumps(pred) + "\n```"

        # Arm design.
        n_arms = rng.choice([2, 3])
        gold_arms, pred_arms = [], []
        for a in range(n_arms):
            g = {"label": f"Arm {chr(65 + a)}", "arm_type": "Experimental" if a == 0 else "Placebo Comparator",
                 "description": self.disjoint_text(3) if rng.random() < 0.8 else "",
                 "intervention_names": [self.disjoint_text(1)] if rng.random() < 0.8 else []}
            p = dict(g)
            if rng.random() < 0.2:
                p["label"] = f"Group {self.fresh('g')}"
            if rng.random() < 0.2:
                p["arm_type"] = self.disjoint_text(1)
            if rng.random() < 0.3:
                p["description"] = self.disjoint_text(3)
            if rng.random() < 0.2:
                p["intervention_names"] = [self.disjoint_text(1)]
            gold_arms.append(g)
            pred_arms.append(p)
        labels = [p["label"] for p in pred_arms]
        if len(set(labels)) != len(labels):
            pred_arms = [dict(g) for g in gold_arms]
        case = f"{rid}-{cid}-arms"
        self.extraction.append({"case_id": case, "citation_id": cid, "review_id": rid, "input": {"task": "arm_design"},
                                "gold": {"task": "arm_design", "record": {"arms": gold_arms}}})
        self.responses["arm_extract"][case] = json.dumps({"arms": pred_arms})

        # Participant statistics.
        groups = [{"group_id": f"BG00{g}", "unit": "participants", "value": str(rng.randrange(20, 400)),
                   "definition": f"Arm {chr(65 + g)}"} for g in range(2)]
        gold_results, pred_results = [], []
        for g in groups:
            if rng.random() < 0.15:
                gold_val = "NOT_REPORTED"
                pred_results.append({"group_id": g["group_id"], "value": "NOT_REPORTED"}) if rng.random() < 0.5 else None
            else:
                gold_val = round(rng.uniform(30, 80), 1)
                pv = gold_val if rng.random() < 0.7 else round(gold_val + 2.5, 1)
                pred_results.append({"group_id": g["group_id"], "value": pv})
            gold_results.append({"group_id": g["group_id"], "value": gold_val, "notes": ""})
        spec = {"measure_definition": "Age", "parameter_type": "Mean", "unit": "years", "groups": groups}
        case = f"{rid}-{cid}-participants"
        self.extraction.append({"case_id": case, "citation_id": cid, "review_id": rid,
                                "input": {"task": "participant_statistics", "spec": spec},
                                "gold": {"task": "participant_statistics",
                                         "record": dict(spec, results=gold_results)}})
        self.responses["participant_extract"][case] = json.dumps({"results": pred_results})

        # Trial results.
        n_res = rng.choice([1, 2])
        gold_vals, pred_vals = [], []
        for _ in range(n_res):
            gv = round(rng.uniform(-3, 3), 2)
            title = self.disjoint_text(2) if rng.random() < 0.7 else ""
            gold_vals.append({"value": gv, "title": title})
            pv = gv if rng.random() < 0.75 else round(gv - 0.4, 2)
            pt = title if rng.random() < 0.7 else self.disjoint_text(2)
            pred_vals.append({"value": pv, "title": pt})
        ospec = {"outcome_definition": "Change in HbA1c", "group_definition": "Treatment arm",
                 "parameter_type": "Mean", "unit": "%", "timeframe": "24 weeks",
                 "denominator_unit": "participants", "denominator_value": 120}
        case = f"{rid}-{cid}-results"
        self.extraction.append({"case_id": case, "citation_id": cid, "review_id": rid,
                                "input": {"task": "trial_results", "spec": ospec},
                                "gold": {"task": "trial_results", "record": dict(ospec, results=gold_vals)}})
        reply = {"unit": "percent", "results": pred_vals}
        self.responses["result_extract"][case] = json.dumps(reply)


# ---------------------------------------------------------------- oracle


def query_matches(doc_tokens, p_terms, i_terms):
    def term(t):
        return all(tok in doc_tokens for tok in tokens(t))
    return any(term(t) for t in p_terms) and any(term(t) for t in i_terms)


def search_oracle(g):
    out = {}
    per = {"recall@3000": [], "recall@K": []}
    for r in sorted(g.reviews, key=lambda r: r["review_id"]):
        p_terms, i_terms = r["_query"]
        ceiling = r["publication_date"]
        hits = []
        for pid, p in g.publications.items():
            toks = set(tokens(p["title"] + "\n" + p["abstract"]))
            if p["publication_date"] <= ceiling and query_matches(toks, p_terms, i_terms):
                hits.append((p["publication_date"], pid))
        hits.sort(key=lambda h: (-date.fromisoformat(h[0]).toordinal(), h[1]))
        ranked = [pid for _, pid in hits][:SEARCH_LIMIT]
        truth = set(r["included_study_ids"])
        r3000 = len(truth & set(ranked)) / len(truth)
        rk = len(truth & set(ranked[:len(truth)])) / len(truth)
        out[f"search.recall@3000.{r['review_id']}"] = r3000
        out[f"search.recall@K.{r['review_id']}"] = rk
        per["recall@3000"].append(r3000)
        per["recall@K"].append(rk)
    for m, vals in per.items():
        out[f"search.{m}"] = sum(vals) / len(vals)
    return out


def parse_assessments(text, ids):
    try:
        value = json.loads(text)
    except ValueError:
        return None
    labels = {a["criterion_id"]: a["label"] for a in value["assessments"]}
    return [labels[i] for i in ids]


def screening_oracle(g):
    out = {}
    per = {k: [] for k in SCREENING_KS}
    for r in sorted(g.reviews, key=lambda r: r["review_id"]):
        rid = r["review_id"]
        ids = ["P1", "I1", "C1"] + (["O1"] if "outcome" in r["pico"] else [])
        scored = []
        for cid in g.candidates[rid]:
            replies = g.responses["screening"][f"{rid}/{cid}"]
            replies = replies if isinstance(replies, list) else [replies]
            labels = None
            for reply in replies[:2]:
                labels = parse_assessments(reply, ids)
                if labels is not None:
                    break
            score = 0.0 if labels is None else sum(LABEL_SCORE[l] for l in labels) / len(labels)
            scored.append((score, cid))
        scored.sort(key=lambda s: (-s[0], s[1]))
        ranked = [cid for _, cid in scored]
        truth = set(r["included_study_ids"])
        for k in SCREENING_KS:
            v = len(truth & set(ranked[:k])) / len(truth)
            out[f"screening.recall@{k}.{rid}"] = v
            per[k].append(v)
    for k, vals in per.items():
        out[f"screening.recall@{k}"] = sum(vals) / len(vals)
    return out


def parse_num(v):
    if isinstance(v, (int, float)):
        return float(v)
    if v == "NOT_REPORTED":
        return None
    return float(v.replace(",", ""))


def text_same(a, b):
    """Token-identical text counts as a match, token-disjoint text does not."""
    ta, tb = tokens(a), tokens(b)
    if sorted(ta) == sorted(tb):
        return True
    assert not set(ta) & set(tb), (a, b)
    return False


def join(v):
    return "; ".join(v) if isinstance(v, list) else str(v)


def field_outcomes(case, reply):
    """(correct, group) for every gold field, mirroring the documented rules."""
    task = case["input"]["task"]
    gold = case["gold"]["record"]
    pred = json.loads(reply.strip().removeprefix("```json").removesuffix("```"))
    res = []

    def text_field(g, p):
        g_nr = g in ("", [], None, "NOT_REPORTED")
        p_nr = p in ("", [], None, "NOT_REPORTED")
        if g_nr or p_nr:
            return (g_nr and p_nr, "text")
        return (text_same(join(p), join(g)), "text")

    def num_field(g, p):
        gv = parse_num(g)
        pv = None if p is None else parse_num(p)
        return (gv == pv, "numeric")

    if task == "study_characteristics":
        for f in case["input"]["fields"]:
            g, p = gold[f["name"]], pred.get(f["name"])
            res.append(num_field(g, p) if f["value_kind"] == "number" else text_field(g, p))
    elif task == "arm_design":
        parr = pred["arms"]
        for i, g in enumerate(gold["arms"]):
            p = parr[i] if i < len(parr) else {}
            for key in ("label", "arm_type", "description", "intervention_names"):
                res.append(text_field(g[key], p.get(key)))
    elif task == "participant_statistics":
        by = {r["group_id"]: r["value"] for r in pred["results"]}
        for r in gold["results"]:
            res.append(num_field(r["value"], by.get(r["group_id"])))
    elif task == "trial_results":
        for i, g in enumerate(gold["results"]):
            p = pred["results"][i]
            res.append(num_field(g["value"], p["value"]))
            res.append(text_field(g["title"], p["title"]))
    return res


def extraction_oracle(g):
    out = {}
    by_task = {}
    for case in sorted(g.extraction, key=lambda c: c["case_id"]):
        task = case["input"]["task"]
        kind = {"study_characteristics": "char_extract", "arm_design": "arm_extract",
                "participant_statistics": "participant_extract", "trial_results": "result_extract"}[task]
        by_task.setdefault(task, []).extend(field_outcomes(case, g.responses[kind][case["case_id"]]))
    correct = total = 0
    for task, items in sorted(by_task.items()):
        out[f"extraction.accuracy.{task}"] = sum(1.0 if c else 0.0 for c, _ in items) / len(items)
        for grp in ("numeric", "text"):
            sub = [c for c, gname in items if gname == grp]
            if sub:
                out[f"extraction.accuracy.{task}.{grp}"] = sum(1.0 if c else 0.0 for c in sub) / len(sub)
        correct += sum(1 for c, _ in items if c)
        total += len(items)
    out["extraction.accuracy.overall"] = correct / total
    return out


def render(g):
    files = {}
    pubs = [g.publications[k] for k in sorted(g.publications)]
    files["registry/publications/publications.json"] = json.dumps(pubs, indent=1) + "\n"
    reviews = [{k: v for k, v in r.items() if not k.startswith("_")} for r in g.reviews]
    files["reviews.json"] = json.dumps(reviews, indent=1) + "\n"
    files["candidates.json"] = json.dumps(g.candidates, indent=1) + "\n"
    files["extraction.json"] = json.dumps(g.extraction, indent=1) + "\n"
    files["responses.json"] = json.dumps(g.responses, indent=1, sort_keys=True) + "\n"
    expected = {}
    expected.update(search_oracle(g))
    expected.update(screening_oracle(g))
    expected.update(extraction_oracle(g))
    files["expected.json"] = json.dumps(dict(sorted(expected.items())), indent=1) + "\n"
    return files


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()
    g = Gen()
    g.build()
    files = render(g)
    if args.check:
        stale = [p for p, text in files.items() if not (OUT / p).exists() or (OUT / p).read_text() != text]
        if stale:
            print("stale fixture files:", ", ".join(stale))
            return 1
        print("fixtures up to date")
        return 0
    for p, text in files.items():
        path = OUT / p
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    print(f"wrote {len(files)} files to {OUT.relative_to(ROOT)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
