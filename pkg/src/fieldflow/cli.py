"""Pipeline orchestration: preprocess, cluster-subjects, train, infer,
analyze and validate subcommands.

Every stage writes its artifacts with a provenance header (tool version,
effective configuration, seed, input digests) and refuses to consume
artifacts whose recorded upstream digests do not match the inputs on disk
unless ``--force`` is given. Failures exit nonzero with one
machine-parseable line on stderr: ``CONFIG:``, ``DATA:`` or
``RESOURCE:`` followed by the message.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import __version__, corpus, flow, plda, provenance, stats, taxonomy

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RESOURCE = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _config_callback(ctx: click.Context, param: click.Parameter, value):
    if value:
        ctx.default_map = dict(ctx.default_map or {})
        ctx.default_map.update(_read_config_file(value))
    return value


def _common_options(fn):
    fn = click.option("--config", type=click.Path(exists=False), is_eager=True,
                      expose_value=False, callback=_config_callback,
                      help="Flat key=value config file; flags override it.")(fn)
    return fn


def _bundle_digests(bundle: Path) -> dict[str, str]:
    return {
        "vocabulary": provenance.sha256_file(bundle / corpus.VOCABULARY_FILE),
        "documents": provenance.sha256_file(bundle / corpus.DOCUMENTS_FILE),
    }


def _check_digests(recorded: dict, presented: dict[str, str], what: str, force: bool):
    mismatched = sorted(k for k, v in presented.items()
                        if k in recorded and recorded[k] != v)
    if mismatched and not force:
        raise ConfigError(
            f"{what} was produced from different inputs (digest mismatch: "
            f"{', '.join(mismatched)}); pass --force to override")
    if mismatched:
        logger.warning("digest mismatch on %s (%s); continuing under --force",
                       what, ", ".join(mismatched))


def _load_bundle(path: str):
    bundle = Path(path)
    if not (bundle / corpus.VOCABULARY_FILE).exists():
        raise ConfigError(f"no corpus bundle at {path}")
    return corpus.read_bundle(bundle)


def _relabel(docs, taxonomy_path: str, tier: str):
    tax = taxonomy.load_taxonomy(taxonomy_path)
    tier_id = taxonomy.AREA_TIER if tier == "area" else taxonomy.SUBJECT_TIER
    return tax, taxonomy.relabel_documents(docs, tax, tier_id)


@click.group()
@click.version_option(version=__version__, prog_name="fieldflow")
def cli():
    """Measure the flow of language between academic fields."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@_common_options
@click.option("--records", required=True, type=click.Path(exists=True))
@click.option("--stopwords", "stopwords_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--min-df", default=corpus.DEFAULT_MIN_DF, show_default=True)
@click.option("--include-title/--no-include-title", default=True, show_default=True)
@click.option("--year-start", default=corpus.DEFAULT_YEAR_RANGE[0], show_default=True)
@click.option("--year-end", default=corpus.DEFAULT_YEAR_RANGE[1], show_default=True)
@click.option("--threads", default=1, show_default=True)
def preprocess(records, stopwords_path, out_dir, min_df, include_title,
               year_start, year_end, threads):
    """Tokenize, stem and prune raw records into a corpus bundle."""
    stopwords = corpus.load_stopwords(stopwords_path)
    recs = list(corpus.iter_records(records, year_range=(year_start, year_end)))
    if not recs:
        raise DataError(f"no usable records in {records}")
    docs, vocab = corpus.preprocess(recs, stopwords=stopwords, min_df=min_df,
                                    include_title=include_title, workers=threads)
    header = provenance.build_header(
        "preprocess",
        config={"min_df": min_df, "include_title": include_title,
                "year_start": year_start, "year_end": year_end},
        inputs={"records": provenance.sha256_file(records),
                "stopwords": provenance.sha256_file(stopwords_path)},
        seed=0)
    corpus.write_bundle(out_dir, docs, vocab, header)
    click.echo(f"wrote bundle: {len(docs)} documents, vocabulary {len(vocab)} "
               f"(dropped {len(recs) - len(docs)} empty)")


@cli.command("cluster-subjects")
@_common_options
@click.option("--bundle", required=True, type=click.Path(exists=True))
@click.option("--out-dendrogram", required=True, type=click.Path())
@click.option("--target", type=int, default=None,
              help="Cut the tree into this many areas and write a taxonomy.")
@click.option("--curation", type=click.Path(exists=True), default=None)
@click.option("--out-taxonomy", type=click.Path(), default=None)
def cluster_subjects(bundle, out_dendrogram, target, curation, out_taxonomy):
    """Cluster subject codes bottom-up from tf-idf cosine similarity."""
    docs, vocab = _load_bundle(bundle)
    vectors = taxonomy.subject_vectors(docs, vocab)
    dendro = taxonomy.single_link_hac(vectors, dim=len(vocab))
    inputs = _bundle_digests(Path(bundle))
    header = provenance.build_header("cluster-subjects", config={"target": target},
                                     inputs=inputs, seed=0)
    taxonomy.write_dendrogram(out_dendrogram, dendro, header)
    click.echo(f"wrote dendrogram: {len(dendro.merges)} merges over {len(dendro.leaves)} subjects")
    if target is not None:
        if not out_taxonomy:
            raise ConfigError("--target requires --out-taxonomy")
        rows = taxonomy.read_curation(curation) if curation else ()
        if curation:
            inputs = dict(inputs, curation=provenance.sha256_file(curation))
        tax = taxonomy.cut_to_areas(dendro, target, rows)
        header = provenance.build_header("cluster-subjects", config={"target": target},
                                         inputs=inputs, seed=0)
        taxonomy.write_taxonomy(out_taxonomy, tax, header)
        click.echo(f"wrote taxonomy: {len(tax.areas)} areas")


def _model_options(fn):
    for opt in reversed([
        click.option("--topics-per-label", default=12, show_default=True),
        click.option("--background-topics", default=1, show_default=True),
        click.option("--alpha", default=0.1, show_default=True),
        click.option("--eta", default=0.01, show_default=True),
        click.option("--sweeps", default=1000, show_default=True),
        click.option("--burn-in", default=500, show_default=True),
        click.option("--lag", default=10, show_default=True),
        click.option("--seed", default=0, show_default=True),
        click.option("--threads", default=1, show_default=True),
    ]):
        fn = opt(fn)
    return fn


def _fit_model(docs, vocab, tax, seed, **params) -> plda.PartiallyLabeledLDA:
    model = plda.PartiallyLabeledLDA(seed=seed, **params)
    model.fit(docs, vocab, labels=sorted({l for d in docs for l in d.labels}),
              background_label=tax.background)
    return model


@cli.command()
@_common_options
@click.option("--bundle", required=True, type=click.Path(exists=True))
@click.option("--taxonomy", "taxonomy_path", required=True, type=click.Path(exists=True))
@click.option("--tier", type=click.Choice(["area", "subject"]), default="area",
              show_default=True)
@click.option("--model", "model_path", required=True, type=click.Path())
@_model_options
def train(bundle, taxonomy_path, tier, model_path, topics_per_label, background_topics,
          alpha, eta, sweeps, burn_in, lag, seed, threads):
    """Learn the label-constrained topic model from a corpus bundle."""
    docs, vocab = _load_bundle(bundle)
    tax, docs = _relabel(docs, taxonomy_path, tier)
    model = _fit_model(
        docs, vocab, tax, seed,
        topics_per_label=topics_per_label, background_topics=background_topics,
        alpha=alpha, eta=eta, sweeps=sweeps, burn_in=burn_in, lag=lag, workers=threads)
    prov = provenance.header_json(
        "train",
        config={"tier": tier, **{k: v for k, v in model.config_.__dict__.items()}},
        inputs={**_bundle_digests(Path(bundle)),
                "taxonomy": provenance.sha256_file(taxonomy_path)},
        seed=seed)
    model.save(model_path, prov=prov)
    click.echo(f"wrote model: {len(model.labels_)} labels, "
               f"{int(model.topic_label_.shape[0])} topics, "
               f"{model.n_snapshots_} snapshots")


@cli.command()
@_common_options
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--bundle", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--infer-sweeps", default=200, show_default=True)
@click.option("--infer-burn-in", default=100, show_default=True)
@click.option("--seed", default=None, type=int,
              help="Inference seed (defaults to the model's training seed).")
@click.option("--threads", default=1, show_default=True)
@click.option("--force", is_flag=True, help="Run despite input digest mismatches.")
def infer(model_path, bundle, out_path, infer_sweeps, infer_burn_in, seed, threads, force):
    """Attribute every document's tokens over the full label set."""
    model = plda.PartiallyLabeledLDA.load(model_path)
    docs, vocab = _load_bundle(bundle)
    recorded = getattr(model, "provenance_", {}).get("inputs", {})
    _check_digests(recorded, _bundle_digests(Path(bundle)), "model", force)
    if model.vocabulary_ is not None and model.vocabulary_.terms != vocab.terms:
        raise DataError("bundle vocabulary differs from the model's; re-preprocess "
                        "or train against this bundle")
    model.set_params(infer_sweeps=infer_sweeps, infer_burn_in=infer_burn_in,
                     workers=threads,
                     **({"seed": seed} if seed is not None else {}))
    model.config_ = model._config()
    result = model.transform(docs)
    prov = provenance.header_json(
        "infer",
        config={"infer_sweeps": infer_sweeps, "infer_burn_in": infer_burn_in},
        inputs={**_bundle_digests(Path(bundle)),
                "model": provenance.sha256_file(model_path)},
        seed=model.config_.seed)
    plda.write_attribution(out_path, result, prov=prov,
                           background_label=model.background_label_)
    click.echo(f"wrote attribution for {result.n_docs} documents "
               f"({len(result.skipped_ids)} skipped)")


def _scope_areas(tax: taxonomy.LabelTaxonomy, professional: str,
                 professional_broads: str, include_areas: str,
                 exclude_areas: str) -> list[str]:
    areas = list(tax.areas)
    if professional == "exclude":
        broads = {b.strip() for b in professional_broads.split(",") if b.strip()}
        areas = [a for a in areas if tax.broad_of(a) not in broads]
    if include_areas:
        allow = {a.strip() for a in include_areas.split(",") if a.strip()}
        unknown = sorted(allow - set(tax.areas))
        if unknown:
            raise ConfigError(f"--include-areas references unknown areas: {unknown}")
        areas = [a for a in areas if a in allow]
    if exclude_areas:
        deny = {a.strip() for a in exclude_areas.split(",") if a.strip()}
        areas = [a for a in areas if a not in deny]
    if not areas:
        raise ConfigError("analysis scope is empty after filtering")
    return areas


PROFESSIONAL_BROADS = "Education,Business,Law,Health and Medical Sciences"


@cli.command()
@_common_options
@click.option("--attribution", "attribution_path", required=True,
              type=click.Path(exists=True))
@click.option("--bundle", required=True, type=click.Path(exists=True))
@click.option("--taxonomy", "taxonomy_path", required=True, type=click.Path(exists=True))
@click.option("--tier", type=click.Choice(["area", "subject"]), default="area",
              show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--buckets", default="all", show_default=True,
              help="all, annual, 5y, decade, or start:end[,start:end...]")
@click.option("--year-start", default=corpus.DEFAULT_YEAR_RANGE[0], show_default=True)
@click.option("--year-end", default=corpus.DEFAULT_YEAR_RANGE[1], show_default=True)
@click.option("--resamples", default=500, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--series", "series_pairs", multiple=True,
              help="source:target pair to export as a time series (repeatable).")
@click.option("--scores-per-bucket", is_flag=True,
              help="Compute net source scores per bucket instead of whole-period.")
@click.option("--professional-areas", type=click.Choice(["include", "exclude"]),
              default="exclude", show_default=True)
@click.option("--professional-broads", default=PROFESSIONAL_BROADS, show_default=True)
@click.option("--include-areas", default="", help="Comma list restricting analysis scope.")
@click.option("--exclude-areas", default="", help="Comma list removed from analysis scope.")
@click.option("--matrix-intervals", is_flag=True,
              help="Attach bootstrap intervals to matrix cells.")
@click.option("--chord-floor", default=0.0, show_default=True)
@click.option("--force", is_flag=True, help="Run despite input digest mismatches.")
def analyze(attribution_path, bundle, taxonomy_path, tier, out_dir, buckets,
            year_start, year_end, resamples, seed, series_pairs, scores_per_bucket,
            professional_areas, professional_broads, include_areas, exclude_areas,
            matrix_intervals, chord_floor, force):
    """Incorporation matrices, flow series, chord edges and net source scores."""
    docs, _ = _load_bundle(bundle)
    tax, docs = _relabel(docs, taxonomy_path, tier)
    tier_id = taxonomy.AREA_TIER if tier == "area" else taxonomy.SUBJECT_TIER
    labels = tax.labels(tier_id)
    att = plda.read_attribution(attribution_path, labels, background_label=tax.background)
    att_prov = _attribution_provenance(attribution_path)
    _check_digests(att_prov.get("inputs", {}), _bundle_digests(Path(bundle)),
                   "attribution", force)
    keep = {d.id for d in docs}
    if set(att.doc_ids) - keep:
        raise DataError("attribution covers documents absent from the bundle")
    docs = [d for d in docs if d.id in set(att.doc_ids)]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bucket_list = flow.make_buckets(buckets, (year_start, year_end))
    config_echo = {"buckets": buckets, "resamples": resamples, "tier": tier,
                   "professional_areas": professional_areas,
                   "year_start": year_start, "year_end": year_end}
    inputs = {**_bundle_digests(Path(bundle)),
              "attribution": provenance.sha256_file(attribution_path),
              "taxonomy": provenance.sha256_file(taxonomy_path)}
    header = provenance.build_header("analyze", config=config_echo, inputs=inputs,
                                     seed=seed)

    for bucket in bucket_list:
        matrix = flow.incorporation_matrix(
            att, docs, bucket, background_label=tax.background,
            resamples=resamples if matrix_intervals else 0, seed=seed)
        flow.write_matrix(out / f"matrix_{bucket.label}.tsv", matrix, header)
        edges = flow.chord_export(matrix, tax, floor=chord_floor)
        flow.write_chords(out / f"chord_{bucket.label}.ndjson", edges,
                          prov=provenance.header_json("analyze", config=config_echo,
                                                      inputs=inputs, seed=seed))

    for pair in series_pairs:
        try:
            source, target = pair.split(":", 1)
        except ValueError:
            raise ConfigError(f"--series expects source:target, got {pair!r}")
        series = flow.flow_series(att, docs, source, target, bucket_list,
                                  resamples=resamples, seed=seed,
                                  background_label=tax.background)
        flow.write_series(out / f"series_{source}__{target}.tsv", series, header)

    scope = _scope_areas(tax, professional_areas, professional_broads,
                         include_areas, exclude_areas)
    score_buckets = (bucket_list if scores_per_bucket
                     else flow.make_buckets("all", (year_start, year_end)))
    all_scores, all_verdicts = [], []
    for bucket in score_buckets:
        verdicts = stats.all_pair_verdicts(att, docs, scope, bucket,
                                           resamples=resamples, seed=seed)
        all_verdicts.extend(verdicts)
        all_scores.extend(stats.net_source_scores(verdicts))
    stats.write_scores(out / "scores.tsv", all_scores, header)
    stats.write_verdicts(out / "verdicts.tsv", all_verdicts, header)
    click.echo(f"wrote analysis to {out_dir}: {len(bucket_list)} bucket(s), "
               f"{len(all_scores)} scores")


def _attribution_provenance(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        return json.loads(first).get("_provenance", {})
    except json.JSONDecodeError:
        raise DataError(f"{path}: missing attribution provenance line")


@cli.command()
@_common_options
@click.option("--bundle", required=True, type=click.Path(exists=True))
@click.option("--taxonomy", "taxonomy_path", required=True, type=click.Path(exists=True))
@click.option("--tier", type=click.Choice(["area", "subject"]), default="area",
              show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--k-grid", default="2,4,8", show_default=True,
              help="Comma list of topics-per-label values to compare.")
@click.option("--buckets", default="all", show_default=True)
@click.option("--year-start", default=corpus.DEFAULT_YEAR_RANGE[0], show_default=True)
@click.option("--year-end", default=corpus.DEFAULT_YEAR_RANGE[1], show_default=True)
@click.option("--alpha", default=0.1, show_default=True)
@click.option("--eta", default=0.01, show_default=True)
@click.option("--sweeps", default=1000, show_default=True)
@click.option("--burn-in", default=500, show_default=True)
@click.option("--lag", default=10, show_default=True)
@click.option("--infer-sweeps", default=200, show_default=True)
@click.option("--infer-burn-in", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--threads", default=1, show_default=True)
def validate(bundle, taxonomy_path, tier, out_path, k_grid, buckets, year_start,
             year_end, alpha, eta, sweeps, burn_in, lag, infer_sweeps, infer_burn_in,
             seed, threads):
    """Train a model family and report cross-model borrowing correlations."""
    try:
        k_values = [int(x) for x in k_grid.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse --k-grid {k_grid!r}")
    if len(k_values) < 2:
        raise ConfigError("--k-grid needs at least two values")
    docs, vocab = _load_bundle(bundle)
    tax, docs = _relabel(docs, taxonomy_path, tier)
    bucket_list = flow.make_buckets(buckets, (year_start, year_end))

    named_vectors = []
    for k in k_values:
        model = plda.PartiallyLabeledLDA(
            topics_per_label=k, alpha=alpha, eta=eta, sweeps=sweeps, burn_in=burn_in,
            lag=lag, infer_sweeps=infer_sweeps, infer_burn_in=infer_burn_in,
            seed=plda.derive_seed(seed, "validate", k) % (2 ** 31), workers=threads)
        model.fit(docs, vocab, labels=sorted({l for d in docs for l in d.labels}),
                  background_label=tax.background)
        att = model.transform(docs)
        if tier == "subject":
            att = stats.collapse_to_areas(att, tax)
            member_docs = taxonomy.relabel_documents(docs, tax, taxonomy.AREA_TIER)
        else:
            member_docs = docs
        matrices = [flow.incorporation_matrix(att, member_docs, bucket,
                                              background_label=tax.background)
                    for bucket in bucket_list]
        vec, mask = flow.borrowing_vector(matrices)
        named_vectors.append((f"K{k}", vec, mask))
        click.echo(f"model K={k}: trained and attributed")
    report = stats.consistency_report(named_vectors)
    header = provenance.build_header(
        "validate",
        config={"k_grid": k_grid, "tier": tier, "buckets": buckets,
                "alpha": alpha, "eta": eta, "sweeps": sweeps},
        inputs={**_bundle_digests(Path(bundle)),
                "taxonomy": provenance.sha256_file(taxonomy_path)},
        seed=seed)
    stats.write_consistency(out_path, report, header)
    click.echo(f"wrote consistency report; min off-diagonal correlation "
               f"{report.min_off_diagonal():.4f}")


def main(argv=None) -> int:
    """Entry point with machine-parseable error classes."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        print("CONFIG: aborted", file=sys.stderr)
        return EXIT_CONFIG
    except (click.ClickException, ConfigError, FileNotFoundError) as exc:
        message = getattr(exc, "message", None) or str(exc)
        print(f"CONFIG: {message}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, taxonomy.TaxonomyError, flow.FlowError, stats.StatsError,
            ValueError) as exc:
        print(f"DATA: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MemoryError as exc:
        print(f"RESOURCE: out of memory{': ' + str(exc) if str(exc) else ''}",
              file=sys.stderr)
        return EXIT_RESOURCE
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
