#include "bsr/ranksel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "bsr/errors.hpp"
#include "bsr/rng.hpp"

namespace bsr::ranksel {

namespace {

int64_t rank_sum(const RankVector & r) {
    int64_t s = 0;
    for (const int64_t v : r) s += v;
    return s;
}

// Order-independent candidate tag for the final tie-break key.
uint64_t rank_tag(uint64_t seed, const RankVector & r) {
    uint64_t h = 1469598103934665603ull ^ splitmix64(seed);
    for (const int64_t v : r) {
        h ^= static_cast<uint64_t>(v);
        h *= 1099511628211ull;
    }
    return splitmix64(h);
}

struct Scored {
    BeamCandidate cand;
    int64_t ranksum = 0;
    uint64_t tag = 0;
};

// Beam ordering: accuracy desc, rank sum asc, seeded tag asc.
bool beam_less(const Scored & x, const Scored & y) {
    if (x.cand.a != y.cand.a) return x.cand.a > y.cand.a;
    if (x.ranksum != y.ranksum) return x.ranksum < y.ranksum;
    if (x.tag != y.tag) return x.tag < y.tag;
    return x.cand.r < y.cand.r;
}

const nn::DenseLayer & dense_layer(const nn::Model & m, size_t l) {
    const auto * d = std::get_if<nn::DenseLayer>(&m.layers[l]);
    if (d == nullptr) {
        throw InvalidInput("rank selection requires a dense base model (layer " +
                           std::to_string(l) + " is factorized)");
    }
    return *d;
}

void check_ranks_against(const nn::Model & base, const RankVector & r) {
    if (r.size() != base.layers.size()) {
        throw InvalidInput("rank vector: one rank per layer required");
    }
    for (size_t l = 0; l < r.size(); ++l) {
        const nn::DenseLayer & d = dense_layer(base, l);
        const int64_t R = std::min(d.w.rows, d.w.cols);
        if (r[l] < 1 || r[l] > R) {
            throw InvalidInput("rank vector: entry " + std::to_string(l) + " out of [1, " +
                               std::to_string(R) + "]");
        }
    }
}

// Shared evaluation state for one search: frozen factors, a gathered
// evaluation set and a memo keyed by rank vector.
struct Evaluator {
    const nn::Model & base;
    const FactorCache & cache;
    Matrix features;
    std::vector<int> labels;
    std::map<RankVector, double> memo;

    double accuracy(const RankVector & r) {
        auto it = memo.find(r);
        if (it != memo.end()) return it->second;
        const double a = truncated_accuracy(base, cache, r, features, labels);
        memo.emplace(r, a);
        return a;
    }
};

Evaluator make_evaluator(const nn::Model & base, const FactorCache & cache,
                         const dataio::Dataset & ds, uint64_t seed, int64_t val_subset) {
    if (ds.val.empty()) {
        throw InvalidInput("rank search: dataset has no validation split");
    }
    std::vector<int64_t> idx = ds.val;
    if (val_subset > 0 && val_subset < static_cast<int64_t>(idx.size())) {
        Rng rng(splitmix64(seed ^ 0x76616c5f73756221ull));
        std::vector<int64_t> pick = rng.sample(static_cast<int64_t>(idx.size()), val_subset);
        std::vector<int64_t> subset;
        subset.reserve(pick.size());
        for (const int64_t p : pick) subset.push_back(idx[static_cast<size_t>(p)]);
        idx = std::move(subset);
    }
    dataio::Subset s = dataio::gather(ds, idx);
    return Evaluator{base, cache, std::move(s.features), std::move(s.labels), {}};
}

} // namespace

void validate(const SearchConfig & cfg) {
    if (cfg.c_d <= 0.0 || cfg.c_d >= 1.0) {
        throw InvalidInput("search config: c_d must lie in (0, 1)");
    }
    if (cfg.tau < 0.0 || cfg.c_d - cfg.tau <= 0.0) {
        throw InvalidInput("search config: need tau >= 0 and c_d - tau > 0");
    }
    if (cfg.k < 1) {
        throw InvalidInput("search config: beam size must be >= 1");
    }
    if (cfg.s < 1) {
        throw InvalidInput("search config: step size must be >= 1");
    }
    if (cfg.gamma <= 0.0 || cfg.gamma >= 1.0) {
        throw InvalidInput("search config: gamma must lie in (0, 1)");
    }
    if (cfg.val_subset < 0) {
        throw InvalidInput("search config: val_subset must be >= 0");
    }
}

FactorCache build_factor_cache(const nn::Model & base) {
    nn::validate(base);
    FactorCache cache;
    cache.factors.reserve(base.layers.size());
    for (size_t l = 0; l < base.layers.size(); ++l) {
        cache.factors.push_back(linalg::svd_full(dense_layer(base, l).w));
    }
    return cache;
}

nn::Model truncated_model(const nn::Model & base, const FactorCache & cache,
                          const RankVector & r) {
    check_ranks_against(base, r);
    if (cache.factors.size() != base.layers.size()) {
        throw InvalidInput("factor cache does not match the model");
    }
    nn::Model out;
    out.classes = base.classes;
    for (size_t l = 0; l < base.layers.size(); ++l) {
        const nn::DenseLayer & d = dense_layer(base, l);
        const int64_t R = std::min(d.w.rows, d.w.cols);
        if (r[l] == R) {
            out.layers.push_back(d);
            continue;
        }
        const linalg::SvdFactors f = linalg::truncate(cache.factors[l], r[l]);
        nn::FactorizedLayer fl;
        fl.a = Matrix(r[l], d.w.cols);
        for (int64_t i = 0; i < r[l]; ++i) {
            for (int64_t j = 0; j < d.w.cols; ++j) {
                fl.a(i, j) = f.sigma[static_cast<size_t>(i)] * f.v(j, i);
            }
        }
        fl.b_mat = f.u;
        fl.bias = d.bias;
        fl.activation = d.activation;
        out.layers.emplace_back(std::move(fl));
    }
    return out;
}

double truncated_accuracy(const nn::Model & base, const FactorCache & cache,
                          const RankVector & r, const Matrix & features,
                          const std::vector<int> & labels) {
    const nn::Model m = truncated_model(base, cache, r);
    return nn::evaluate_accuracy(m, features, labels);
}

double truncated_accuracy(const nn::Model & base, const FactorCache & cache,
                          const RankVector & r, const dataio::Dataset & ds) {
    if (ds.val.empty()) {
        throw InvalidInput("truncated_accuracy: dataset has no validation split");
    }
    const dataio::Subset s = dataio::gather(ds, ds.val);
    return truncated_accuracy(base, cache, r, s.features, s.labels);
}

std::vector<RankVector> descendants(const RankVector & r, int64_t s) {
    if (s < 1) {
        throw InvalidInput("descendants: step must be >= 1");
    }
    std::vector<RankVector> out;
    std::set<RankVector> seen;
    for (size_t i = 0; i < r.size(); ++i) {
        if (r[i] <= 1) continue;
        RankVector child = r;
        child[i] = std::max<int64_t>(1, r[i] - s);
        if (seen.insert(child).second) {
            out.push_back(std::move(child));
        }
    }
    return out;
}

void write_trace_csv(const std::vector<TraceRow> & trace, const std::string & path) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot open " + path + " for writing");
    }
    out << "level,step_size,candidate_rank_vector,compression_ratio,val_accuracy,in_beam\n";
    out.precision(12);
    for (const TraceRow & row : trace) {
        out << row.level << ',' << row.step << ',';
        for (size_t i = 0; i < row.r.size(); ++i) {
            if (i > 0) out << ';';
            out << row.r[i];
        }
        out << ',' << row.c << ',' << row.a << ',' << (row.in_beam ? 1 : 0) << "\n";
    }
}

MbsResult mbs_search(const nn::Model & base, const dataio::Dataset & ds,
                     const std::vector<compress::LayerShape> & shapes, const SearchConfig & cfg,
                     const FactorCache * shared_cache, std::vector<TraceRow> * failure_trace) {
    validate(cfg);
    nn::validate(base);
    if (shapes.size() != base.layers.size()) {
        throw InvalidInput("mbs_search: one shape per layer required");
    }

    FactorCache local_cache;
    if (shared_cache == nullptr) {
        local_cache = build_factor_cache(base);
        shared_cache = &local_cache;
    }
    Evaluator eval = make_evaluator(base, *shared_cache, ds, cfg.seed, cfg.val_subset);

    const RankVector r_full = compress::full_ranks(shapes);
    auto score = [&](const RankVector & r) {
        Scored sc;
        sc.cand.r = r;
        sc.cand.c = compress::compression_ratio(shapes, r);
        sc.cand.a = eval.accuracy(r);
        sc.ranksum = rank_sum(r);
        sc.tag = rank_tag(cfg.seed, r);
        return sc;
    };

    std::vector<TraceRow> trace;
    int64_t s = cfg.s;
    int64_t level = 1;

    Scored root = score(r_full);
    trace.push_back({level, s, root.cand.r, root.cand.c, root.cand.a, true});

    // Failure payload: the closest approach to the band (max ratio, then
    // accuracy).
    Scored best_seen = root;
    auto note_seen = [&best_seen](const Scored & sc) {
        if (sc.cand.c > best_seen.cand.c ||
            (sc.cand.c == best_seen.cand.c && sc.cand.a > best_seen.cand.a)) {
            best_seen = sc;
        }
    };

    auto fail = [&](const std::string & why) -> SearchFailure {
        if (failure_trace != nullptr) *failure_trace = trace;
        return SearchFailure("rank search failed: " + why, best_seen.cand.r, best_seen.cand.c,
                             best_seen.cand.a);
    };

    const RankVector all_ones(r_full.size(), 1);
    if (compress::compression_ratio(shapes, all_ones) < cfg.c_d - cfg.tau) {
        Scored ones = score(all_ones);
        note_seen(ones);
        trace.push_back({level, s, ones.cand.r, ones.cand.c, ones.cand.a, false});
        throw fail("even rank-one truncation everywhere stays below the band");
    }

    std::vector<Scored> beam{root};
    while (true) {
        // Stage 2: descendants of every beam member, deduplicated in
        // canonical order, admitted only while C stays at or below c_d.
        std::vector<RankVector> admitted;
        std::set<RankVector> seen_level;
        for (const Scored & parent : beam) {
            for (RankVector & child : descendants(parent.cand.r, s)) {
                if (!seen_level.insert(child).second) continue;
                if (compress::compression_ratio(shapes, child) > cfg.c_d) continue;
                admitted.push_back(std::move(child));
            }
        }

        if (admitted.empty()) {
            if (s == 1) {
                throw fail("beam cannot advance and no candidate reached the band");
            }
            s = std::max<int64_t>(1, static_cast<int64_t>(std::floor(cfg.gamma *
                                                                     static_cast<double>(s))));
            continue;
        }

        level += s;
        std::vector<Scored> scored;
        scored.reserve(admitted.size());
        for (const RankVector & r : admitted) {
            Scored sc = score(r);
            note_seen(sc);
            scored.push_back(std::move(sc));
        }
        std::sort(scored.begin(), scored.end(), beam_less);
        const size_t keep = std::min<size_t>(static_cast<size_t>(cfg.k), scored.size());
        for (size_t i = scored.size(); i-- > 0;) {
            trace.push_back({level, s, scored[i].cand.r, scored[i].cand.c, scored[i].cand.a,
                             i < keep});
        }
        scored.resize(keep);
        beam = std::move(scored);

        const BeamCandidate & top = beam.front().cand;
        if (top.c >= cfg.c_d - cfg.tau && top.c <= cfg.c_d) {
            return MbsResult{top, std::move(trace)};
        }
    }
}

BeamCandidate multi_config_search(const nn::Model & base, const dataio::Dataset & ds,
                                  const std::vector<compress::LayerShape> & shapes,
                                  const SearchConfig & proto, std::vector<ConfigRun> * runs) {
    static constexpr std::pair<int64_t, int> kConfigs[] = {{3, 5}, {5, 5}, {10, 5}};
    const FactorCache cache = build_factor_cache(base);

    std::vector<ConfigRun> local;
    for (const auto & [s, k] : kConfigs) {
        SearchConfig cfg = proto;
        cfg.s = s;
        cfg.k = k;
        ConfigRun run;
        run.s = s;
        run.k = k;
        try {
            MbsResult res = mbs_search(base, ds, shapes, cfg, &cache, &run.trace);
            run.success = true;
            run.candidate = res.selected;
            run.trace = std::move(res.trace);
        } catch (const SearchFailure & f) {
            run.success = false;
            run.candidate = BeamCandidate{f.best_ranks, f.best_ratio, f.best_accuracy};
        }
        local.push_back(std::move(run));
    }

    int best = -1;
    for (int i = 0; i < static_cast<int>(local.size()); ++i) {
        if (!local[static_cast<size_t>(i)].success) continue;
        if (best < 0) {
            best = i;
            continue;
        }
        const BeamCandidate & a = local[static_cast<size_t>(i)].candidate;
        const BeamCandidate & b = local[static_cast<size_t>(best)].candidate;
        if (a.a > b.a || (a.a == b.a && rank_sum(a.r) < rank_sum(b.r))) {
            best = i;
        }
    }

    if (runs != nullptr) *runs = local;
    if (best < 0) {
        const ConfigRun * closest = &local.front();
        for (const ConfigRun & run : local) {
            if (run.candidate.c > closest->candidate.c ||
                (run.candidate.c == closest->candidate.c &&
                 run.candidate.a > closest->candidate.a)) {
                closest = &run;
            }
        }
        throw SearchFailure("rank search failed in every configuration", closest->candidate.r,
                            closest->candidate.c, closest->candidate.a);
    }
    return local[static_cast<size_t>(best)].candidate;
}

BeamCandidate brute_force_best(const nn::Model & base, const dataio::Dataset & ds,
                               const std::vector<compress::LayerShape> & shapes, double c_d,
                               double tau, const std::vector<std::vector<int64_t>> & rank_grid) {
    nn::validate(base);
    if (rank_grid.size() != shapes.size()) {
        throw InvalidInput("brute_force_best: one grid per layer required");
    }
    double combos = 1.0;
    for (const auto & g : rank_grid) {
        if (g.empty()) {
            throw InvalidInput("brute_force_best: empty grid for a layer");
        }
        combos *= static_cast<double>(g.size());
    }
    if (combos > 1e6) {
        throw InvalidInput("brute_force_best: grid too large");
    }

    const FactorCache cache = build_factor_cache(base);
    Evaluator eval = make_evaluator(base, cache, ds, 0, 0);

    bool have_best = false;
    BeamCandidate best;
    bool have_closest = false;
    RankVector closest;
    double closest_dist = 0.0;

    std::vector<size_t> odo(rank_grid.size(), 0);
    while (true) {
        RankVector r(rank_grid.size());
        for (size_t l = 0; l < rank_grid.size(); ++l) {
            r[l] = rank_grid[l][odo[l]];
        }
        const double c = compress::compression_ratio(shapes, r);
        if (c >= c_d - tau && c <= c_d) {
            const double a = eval.accuracy(r);
            if (!have_best || a > best.a ||
                (a == best.a && (rank_sum(r) < rank_sum(best.r) ||
                                 (rank_sum(r) == rank_sum(best.r) && r < best.r)))) {
                best = BeamCandidate{r, c, a};
                have_best = true;
            }
        } else {
            const double dist = (c > c_d) ? c - c_d : (c_d - tau) - c;
            if (!have_closest || dist < closest_dist) {
                closest = r;
                closest_dist = dist;
                have_closest = true;
            }
        }

        size_t l = 0;
        while (l < odo.size() && ++odo[l] == rank_grid[l].size()) {
            odo[l] = 0;
            ++l;
        }
        if (l == odo.size()) break;
    }

    if (!have_best) {
        const double c = compress::compression_ratio(shapes, closest);
        throw SearchFailure("no grid point lands in the band", closest, c,
                            eval.accuracy(closest));
    }
    return best;
}

EnergyResult energy_baseline(const FactorCache & cache,
                             const std::vector<compress::LayerShape> & shapes, double c_d,
                             double tau) {
    if (cache.factors.size() != shapes.size()) {
        throw InvalidInput("energy_baseline: factor cache does not match shapes");
    }
    if (c_d <= 0.0 || c_d >= 1.0 || tau < 0.0 || c_d - tau <= 0.0) {
        throw InvalidInput("energy_baseline: invalid band");
    }

    // Prefix squared-singular-value mass per layer.
    std::vector<std::vector<double>> prefix(shapes.size());
    for (size_t l = 0; l < shapes.size(); ++l) {
        const std::vector<double> & sig = cache.factors[l].sigma;
        prefix[l].resize(sig.size());
        double cum = 0.0;
        for (size_t i = 0; i < sig.size(); ++i) {
            cum += sig[i] * sig[i];
            prefix[l][i] = cum;
        }
    }

    auto ranks_at = [&](double e) {
        RankVector r(shapes.size());
        for (size_t l = 0; l < shapes.size(); ++l) {
            const std::vector<double> & p = prefix[l];
            const double want = e * p.back();
            size_t i = 0;
            while (i + 1 < p.size() && p[i] < want) ++i;
            r[l] = static_cast<int64_t>(i) + 1;
        }
        return r;
    };
    auto ratio_at = [&](double e) { return compress::compression_ratio(shapes, ranks_at(e)); };

    const double low_ratio = ratio_at(0.0); // most aggressive truncation
    if (low_ratio < c_d - tau) {
        return EnergyResult{ranks_at(0.0), low_ratio, false};
    }
    if (low_ratio <= c_d) {
        return EnergyResult{ranks_at(0.0), low_ratio, true};
    }

    double lo = 0.0;
    double hi = 1.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = (lo + hi) / 2.0;
        if (ratio_at(mid) > c_d) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    const double hi_ratio = ratio_at(hi);
    if (hi_ratio >= c_d - tau && hi_ratio <= c_d) {
        return EnergyResult{ranks_at(hi), hi_ratio, true};
    }
    const double lo_ratio = ratio_at(lo);
    const double lo_dist = lo_ratio - c_d;
    const double hi_dist = (c_d - tau) - hi_ratio;
    if (lo_dist <= hi_dist) {
        return EnergyResult{ranks_at(lo), lo_ratio, false};
    }
    return EnergyResult{ranks_at(hi), hi_ratio, false};
}

} // namespace bsr::ranksel
