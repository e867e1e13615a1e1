"""
From crowd votes to labels
==========================

Reads the bundled vote fixture, qualifies annotators against gold answers,
aggregates by majority vote and measures agreement.
"""

from importlib import resources

from gcngrasp.annotation import aggregate, filter_annotators, kappa_from_votes, read_gold, read_votes

data = resources.files("gcngrasp") / "data"
votes = read_votes(data / "votes_fixture.csv")
gold = read_gold(data / "gold_fixture.csv")
print(len(votes), "votes from", len({v.annotator_id for v in votes}), "annotators")

# %%
# Annotators below 75% accuracy on the gold questions are dropped.
q = filter_annotators(votes, gold, threshold=0.75)
for who in sorted(q.accuracy):
    print(f"{who}: accuracy {q.accuracy[who]:.2f}", "(kept)" if who in q.qualified else "(dropped)")

# %%
# Majority vote over the qualified annotators; ties are reported, not guessed.
agg = aggregate(votes, q.qualified, gold)
for item in sorted(agg.labels):
    print(item, agg.labels[item])
print("ties:", agg.ties)

# %%
# Randolph's free-marginal kappa for each annotation stage.
for stage in (1, 2):
    print(f"stage {stage} kappa: {kappa_from_votes(votes, stage):.3f}")
