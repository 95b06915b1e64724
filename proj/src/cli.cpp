#include "cgce/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cgce/errors.hpp"
#include "cgce/random.hpp"
#include "cgce/refinement.hpp"
#include "cgce/store.hpp"
#include "cgce/templates.hpp"
#include "cgce/training.hpp"

namespace cgce::cli {

namespace fs = std::filesystem;

namespace {

// Reported as exit code 2.
class UsageError : public Error {
public:
    using Error::Error;
};

struct Options {
    std::string manifest;
    std::vector<std::string> concept_embeddings;
    std::vector<std::string> checkpoints;
    std::string embedding;
    std::string out;
    std::optional<double> eta;
    std::optional<double> tau;
    std::optional<std::size_t> max_iters;
    std::optional<std::size_t> epochs;
    std::optional<double> lr;
    std::optional<std::size_t> batch;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> heads;
    std::optional<std::size_t> hidden;
    bool no_importance_weighting = false;
    bool emit_trace = false;
    std::string template_concept;
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string exact(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::optional<fs::path> data_dir() {
    if (const char* env = std::getenv("CGCE_DATA_DIR"); env && *env) return fs::path(env);
    return std::nullopt;
}

// Existing input path, trying CGCE_DATA_DIR as a prefix for relative paths.
fs::path input_path(const std::string& raw, const char* what) {
    if (raw.empty()) throw UsageError(std::string("missing required ") + what);
    const fs::path p(raw);
    if (fs::exists(p)) return p;
    if (p.is_relative()) {
        if (auto dir = data_dir(); dir && fs::exists(*dir / p)) return *dir / p;
    }
    throw UsageError(std::string(what) + " '" + raw + "' does not exist");
}

EmbeddingMatrix load_embedding(const std::string& raw, const char* what) {
    return EmbeddingMatrix(read_matrix(input_path(raw, what)));
}

void print_metrics(std::ostream& out, const Metrics& m) {
    out << "accuracy: " << fmt(m.accuracy) << '\n'
        << "true_positive_rate: " << fmt(m.true_positive_rate) << '\n'
        << "false_positive_rate: " << fmt(m.false_positive_rate) << '\n'
        << "loss: " << fmt(m.loss) << '\n'
        << "tp: " << m.tp << '\n'
        << "fp: " << m.fp << '\n'
        << "tn: " << m.tn << '\n'
        << "fn: " << m.fn << '\n';
}

std::size_t default_hidden(std::size_t d) {
    static const std::map<std::size_t, std::size_t> widths = {{768, 256}, {2048, 512}, {4096, 1024}};
    const auto it = widths.find(d);
    if (it == widths.end()) {
        throw UsageError("no default hidden width for embedding width " + std::to_string(d) + "; pass --hidden");
    }
    return it->second;
}

// Seeded split that keeps safe/unsafe twins on the same side. Roughly 10% of
// the pair groups are held out when there are at least two groups.
void split_dataset(const std::vector<LabeledExample>& all, std::uint64_t seed, std::vector<LabeledExample>& train_set,
                   std::vector<LabeledExample>& held_out) {
    std::vector<std::string> groups;
    std::map<std::string, std::size_t> index;
    for (const auto& ex : all) {
        const std::string key = ex.pair_id.value_or(ex.id);
        if (index.emplace(key, groups.size()).second) groups.push_back(key);
    }
    std::vector<std::size_t> order(groups.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed ^ 0x5eedULL);
    rng.shuffle(order);
    std::size_t n_held = 0;
    if (groups.size() >= 2) n_held = std::max<std::size_t>(1, (groups.size() + 5) / 10);
    std::vector<bool> held(groups.size(), false);
    for (std::size_t i = 0; i < n_held; ++i) held[order[i]] = true;
    for (const auto& ex : all) {
        (held[index.at(ex.pair_id.value_or(ex.id))] ? held_out : train_set).push_back(ex);
    }
}

int cmd_train(const Options& o, std::ostream& out) {
    if (o.out.empty()) throw UsageError("missing required --out");
    const fs::path manifest = input_path(o.manifest, "--manifest");
    const EmbeddingMatrix concept_emb = load_embedding(o.concept_embeddings.empty() ? "" : o.concept_embeddings[0],
                                                       "--concept-embedding");
    if (o.concept_embeddings.size() > 1) throw UsageError("train takes a single --concept-embedding");

    const auto examples = read_manifest(manifest, data_dir());
    if (examples.empty()) throw UsageError("manifest '" + o.manifest + "' has no examples");

    TrainConfig config;
    if (o.epochs) config.epochs = *o.epochs;
    if (o.lr) config.learning_rate = *o.lr;
    if (o.batch) config.batch_size = *o.batch;
    if (o.seed) config.seed = *o.seed;
    config.validate();

    Architecture arch;
    arch.d = concept_emb.dim();
    arch.heads = o.heads.value_or(4);
    arch.h = o.hidden ? *o.hidden : default_hidden(arch.d);
    arch.validate();
    const double tau = o.tau.value_or(0.5);
    if (!(tau > 0.0 && tau < 1.0)) throw UsageError("--tau must lie in (0, 1)");

    std::string concept_name = "concept";
    for (const auto& ex : examples) {
        if (!ex.concept_name.empty()) {
            concept_name = ex.concept_name;
            break;
        }
    }

    std::vector<LabeledExample> train_set;
    std::vector<LabeledExample> held_out;
    split_dataset(examples, config.seed, train_set, held_out);

    TrainResult result = train(train_set, concept_emb, arch, config, concept_name);
    result.params.default_tau = tau;
    write_checkpoint(result.params, o.out);

    std::string log;
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
        log += std::to_string(e + 1) + "\t" + exact(result.epoch_loss[e]) + "\n";
    }
    write_file_atomic(o.out + ".loss.log", std::span(reinterpret_cast<const std::uint8_t*>(log.data()), log.size()));

    out << "concept: " << concept_name << '\n'
        << "architecture: d=" << arch.d << " h=" << arch.h << " heads=" << arch.heads
        << " params=" << count_params(arch.d, arch.h) << '\n'
        << "recipe: epochs=" << config.epochs << " lr=" << config.learning_rate << " batch=" << config.batch_size
        << " seed=" << config.seed << '\n'
        << "examples: train=" << train_set.size() << " held_out=" << held_out.size() << '\n';
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
        out << "epoch " << (e + 1) << " loss " << fmt(result.epoch_loss[e]) << '\n';
    }
    if (held_out.empty()) {
        out << "held-out metrics: none (fewer than two pair groups)\n";
    } else {
        out << "held-out metrics (tau=" << fmt(tau) << ")\n";
        print_metrics(out, evaluate(result.params, held_out, concept_emb, tau));
    }
    out << "checkpoint: " << o.out << '\n';
    return kOk;
}

int cmd_detect(const Options& o, std::ostream& out) {
    if (o.checkpoints.size() != 1) throw UsageError("detect takes exactly one --checkpoint");
    if (o.concept_embeddings.size() != 1) throw UsageError("detect takes exactly one --concept-embedding");
    const ClassifierParams params = read_checkpoint(input_path(o.checkpoints[0], "--checkpoint"));
    const EmbeddingMatrix prompt = load_embedding(o.embedding, "--embedding");
    const EmbeddingMatrix concept_emb = load_embedding(o.concept_embeddings[0], "--concept-embedding");
    const double tau = o.tau.value_or(params.default_tau);

    const Detection det = detect(params, prompt, concept_emb, tau);
    out << "concept: " << params.concept_name << '\n'
        << "tau: " << fmt(tau) << '\n'
        << "probability: " << fmt(det.probability) << '\n'
        << (det.flagged ? "FLAGGED" : "CLEAR") << '\n';
    return det.flagged ? kFlagged : kOk;
}

int cmd_refine(const Options& o, std::ostream& out) {
    if (o.checkpoints.empty()) throw UsageError("refine needs at least one --checkpoint");
    if (o.concept_embeddings.size() != o.checkpoints.size()) {
        throw UsageError("refine needs one --concept-embedding per --checkpoint (got " +
                         std::to_string(o.concept_embeddings.size()) + " for " + std::to_string(o.checkpoints.size()) +
                         ")");
    }
    if (o.out.empty()) throw UsageError("missing required --out");

    std::vector<ConceptGuard> guards;
    for (std::size_t i = 0; i < o.checkpoints.size(); ++i) {
        guards.push_back({read_checkpoint(input_path(o.checkpoints[i], "--checkpoint")),
                          load_embedding(o.concept_embeddings[i], "--concept-embedding")});
    }
    const fs::path prompt_path = input_path(o.embedding, "--embedding");
    const std::vector<std::uint8_t> prompt_bytes = read_file(prompt_path);
    const EmbeddingMatrix prompt(read_matrix(prompt_path));

    RefinementConfig config;
    if (o.eta) {
        config.eta = *o.eta;
    } else {
        std::optional<double> chosen;
        for (const auto& g : guards) {
            const auto eta = default_step_size(g.params.concept_name);
            if (!eta) {
                std::string known;
                for (const auto& e : step_size_table()) {
                    if (e.model == "SD-v1.4") known += (known.empty() ? "" : ", ") + std::string(e.concept_name);
                }
                throw UsageError("no default step size for concept '" + g.params.concept_name +
                                 "'; pass --eta explicitly (defaults exist for: " + known + ")");
            }
            chosen = chosen ? std::min(*chosen, *eta) : *eta;
        }
        config.eta = *chosen;
    }
    config.tau = o.tau.value_or(guards.front().params.default_tau);
    if (o.max_iters) config.max_iters = *o.max_iters;
    config.use_importance_weighting = !o.no_importance_weighting;
    config.validate();

    const RefinementResult result = safeguard(guards, prompt, config);
    if (result.flagged) {
        write_tensor(result.refined.values(), o.out);
    } else {
        write_file_atomic(o.out, prompt_bytes);
    }

    if (o.emit_trace) {
        std::string trace = "k\tconcept_id\tprobability\tgrad_norm\tdelta_norm\n";
        for (const auto& rec : result.trace) {
            for (const auto& c : rec.concepts) {
                trace += std::to_string(rec.k) + "\t" + c.concept_id + "\t" + exact(c.probability) + "\t" +
                         exact(c.grad_norm) + "\t" + exact(rec.delta_norm) + "\n";
            }
        }
        write_file_atomic(o.out + ".trace.tsv",
                          std::span(reinterpret_cast<const std::uint8_t*>(trace.data()), trace.size()));
    }

    out << "tau: " << fmt(config.tau) << '\n'
        << "eta: " << fmt(config.eta) << '\n'
        << "importance_weighting: " << (config.use_importance_weighting ? "on" : "off") << '\n'
        << "flagged: " << (result.flagged ? "yes" : "no") << '\n'
        << "iterations: " << result.iterations_run << '\n'
        << "converged: " << (result.converged ? "yes" : "no") << '\n';
    for (std::size_t i = 0; i < guards.size(); ++i) {
        out << "probability[" << guards[i].params.concept_name << "]: " << fmt(result.final_probabilities[i]) << '\n';
    }
    return kOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
    if (o.checkpoints.size() != 1) throw UsageError("eval takes exactly one --checkpoint");
    if (o.concept_embeddings.size() != 1) throw UsageError("eval takes exactly one --concept-embedding");
    const ClassifierParams params = read_checkpoint(input_path(o.checkpoints[0], "--checkpoint"));
    const EmbeddingMatrix concept_emb = load_embedding(o.concept_embeddings[0], "--concept-embedding");
    const auto examples = read_manifest(input_path(o.manifest, "--manifest"), data_dir());
    if (examples.empty()) throw UsageError("manifest '" + o.manifest + "' has no examples");
    const double tau = o.tau.value_or(params.default_tau);

    const Metrics m = evaluate(params, examples, concept_emb, tau);
    out << "concept: " << params.concept_name << '\n'
        << "tau: " << fmt(tau) << '\n'
        << "examples: " << m.total() << '\n';
    print_metrics(out, m);
    return kOk;
}

int cmd_templates(const Options& o, std::ostream& out) {
    const auto text = prompt_template(o.template_concept);
    if (!text) {
        std::string names;
        for (auto n : template_names()) names += (names.empty() ? "" : ", ") + std::string(n);
        throw UsageError("unknown concept '" + o.template_concept + "'; valid names: " + names);
    }
    out << *text;
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Classifier-guided concept erasure over text-encoder embeddings", "cgce"};
    app.require_subcommand(1);
    Options o;

    auto* train_cmd = app.add_subcommand("train", "Train a concept classifier from a dataset manifest");
    train_cmd->add_option("--manifest", o.manifest, "Line-delimited JSON dataset manifest")->required();
    train_cmd->add_option("--concept-embedding", o.concept_embeddings, "Concept embedding (.cgt)")->required();
    train_cmd->add_option("--out", o.out, "Checkpoint to write (.cgck)")->required();
    train_cmd->add_option("--epochs", o.epochs, "Training epochs (default 10)");
    train_cmd->add_option("--lr", o.lr, "Adam learning rate (default 1e-4)");
    train_cmd->add_option("--batch", o.batch, "Batch size (default 32)");
    train_cmd->add_option("--seed", o.seed, "Seed for initialisation, shuffling and the split (default 0)");
    train_cmd->add_option("--heads", o.heads, "Attention heads (default 4)");
    train_cmd->add_option("--hidden", o.hidden, "Hidden width (default from the embedding width)");
    train_cmd->add_option("--tau", o.tau, "Threshold stored in the checkpoint and used for held-out metrics");

    auto* detect_cmd = app.add_subcommand("detect", "Report whether a prompt embedding contains the concept");
    detect_cmd->add_option("--checkpoint", o.checkpoints, "Classifier checkpoint")->required();
    detect_cmd->add_option("--embedding", o.embedding, "Prompt embedding (.cgt)")->required();
    detect_cmd->add_option("--concept-embedding", o.concept_embeddings, "Concept embedding (.cgt)")->required();
    detect_cmd->add_option("--tau", o.tau, "Detection threshold (default from checkpoint)");

    auto* refine_cmd = app.add_subcommand("refine", "Steer a flagged prompt embedding away from the concepts");
    refine_cmd->add_option("--checkpoint", o.checkpoints, "Classifier checkpoint, repeatable")->required();
    refine_cmd->add_option("--concept-embedding", o.concept_embeddings, "Concept embedding per checkpoint")
        ->required();
    refine_cmd->add_option("--embedding", o.embedding, "Prompt embedding (.cgt)")->required();
    refine_cmd->add_option("--out", o.out, "Refined embedding to write (.cgt)")->required();
    refine_cmd->add_option("--eta", o.eta, "Step size (default per concept when known)");
    refine_cmd->add_option("--tau", o.tau, "Detection threshold (default from checkpoint)");
    refine_cmd->add_option("--max-iters", o.max_iters, "Iteration cap (default 50)");
    refine_cmd->add_flag("--no-importance-weighting", o.no_importance_weighting,
                         "Use the raw gradient instead of the importance-weighted one");
    refine_cmd->add_flag("--emit-trace", o.emit_trace, "Write <out>.trace.tsv with one line per iteration and concept");

    auto* eval_cmd = app.add_subcommand("eval", "Detection metrics of a classifier on a manifest");
    eval_cmd->add_option("--checkpoint", o.checkpoints, "Classifier checkpoint")->required();
    eval_cmd->add_option("--manifest", o.manifest, "Line-delimited JSON dataset manifest")->required();
    eval_cmd->add_option("--concept-embedding", o.concept_embeddings, "Concept embedding (.cgt)")->required();
    eval_cmd->add_option("--tau", o.tau, "Detection threshold (default from checkpoint)");

    auto* templates_cmd = app.add_subcommand("templates", "Print the pair-generation instructions for a concept");
    templates_cmd->add_option("concept", o.template_concept, "nudity, van-gogh or church")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        if (!reversed.empty()) reversed.pop_back();  // program name
        app.parse(std::move(reversed));
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kInvalid;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(o, out);
        if (detect_cmd->parsed()) return cmd_detect(o, out);
        if (refine_cmd->parsed()) return cmd_refine(o, out);
        if (eval_cmd->parsed()) return cmd_eval(o, out);
        if (templates_cmd->parsed()) return cmd_templates(o, out);
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return kIoFailure;
    } catch (const RefinementStall& e) {
        err << "error: " << e.what() << '\n';
        return kIoFailure;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kInvalid;
    }
    return kInvalid;
}

}  // namespace cgce::cli
