#include "npenas/archgraph.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "npenas/rng.hpp"

namespace npenas {

OpVocab OpVocab::with_interior(const std::vector<std::string>& interior_names) {
    OpVocab v;
    v.names = {"input", "output", "isolated"};
    v.names.insert(v.names.end(), interior_names.begin(), interior_names.end());
    v.input = 0;
    v.output = 1;
    v.isolated = 2;
    return v;
}

OpVocab OpVocab::from_names(const std::vector<std::string>& names) {
    OpVocab v;
    v.names = names;
    for (int i = 0; i < static_cast<int>(names.size()); ++i) {
        if (names[i] == "input") {
            if (v.input >= 0) throw SizeError("vocabulary has duplicated \"input\"");
            v.input = i;
        } else if (names[i] == "output") {
            if (v.output >= 0) throw SizeError("vocabulary has duplicated \"output\"");
            v.output = i;
        } else if (names[i] == "isolated") {
            if (v.isolated >= 0) throw SizeError("vocabulary has duplicated \"isolated\"");
            v.isolated = i;
        }
    }
    if (v.input < 0 || v.output < 0 || v.isolated < 0) {
        throw SizeError("vocabulary must contain \"input\", \"output\" and \"isolated\"");
    }
    return v;
}

std::vector<int> OpVocab::interior_kinds() const {
    std::vector<int> out;
    for (int k = 0; k < size(); ++k) {
        if (is_interior(k)) out.push_back(k);
    }
    return out;
}

ArchGraph::ArchGraph(int n, std::vector<int> node_ops)
    : num_nodes(n), adj(static_cast<std::size_t>(n) * n, 0), ops(std::move(node_ops)) {
    if (static_cast<int>(ops.size()) != n) throw SizeError("ops length does not match node count");
}

int ArchGraph::edge_count() const {
    return static_cast<int>(std::count(adj.begin(), adj.end(), std::uint8_t{1}));
}

std::string GraphKey::hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(digest));
    return std::string(buf);
}

GraphKey GraphKey::from_hex(const std::string& hex) {
    return GraphKey{std::strtoull(hex.c_str(), nullptr, 16)};
}

int PathEncoding::popcount() const {
    return static_cast<int>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

PathUniverse PathUniverse::from_sequences(std::vector<std::vector<int>> seqs) {
    std::sort(seqs.begin(), seqs.end());
    seqs.erase(std::unique(seqs.begin(), seqs.end()), seqs.end());
    PathUniverse u;
    u.seqs = std::move(seqs);
    std::uint64_t h = mix64(0x7061746855ULL, u.seqs.size());
    for (int i = 0; i < static_cast<int>(u.seqs.size()); ++i) {
        u.index_of.emplace(u.seqs[i], i);
        h = mix64(h, u.seqs[i].size());
        for (int k : u.seqs[i]) h = mix64(h, static_cast<std::uint64_t>(k));
    }
    u.universe_id = h;
    return u;
}

std::vector<std::uint8_t> reachable_from_input(const ArchGraph& g) {
    std::vector<std::uint8_t> seen(g.num_nodes, 0);
    std::vector<int> stack = {0};
    seen[0] = 1;
    while (!stack.empty()) {
        int u = stack.back();
        stack.pop_back();
        for (int v = 0; v < g.num_nodes; ++v) {
            if (g.edge(u, v) && !seen[v]) {
                seen[v] = 1;
                stack.push_back(v);
            }
        }
    }
    return seen;
}

std::vector<std::uint8_t> reaches_output(const ArchGraph& g) {
    std::vector<std::uint8_t> seen(g.num_nodes, 0);
    std::vector<int> stack = {g.num_nodes - 1};
    seen[g.num_nodes - 1] = 1;
    while (!stack.empty()) {
        int v = stack.back();
        stack.pop_back();
        for (int u = 0; u < g.num_nodes; ++u) {
            if (g.edge(u, v) && !seen[u]) {
                seen[u] = 1;
                stack.push_back(u);
            }
        }
    }
    return seen;
}

ValidationReport validate(const ArchGraph& g, const OpVocab& vocab) {
    ValidationReport report;
    auto add = [&report](const std::string& s) { report.violations.push_back(s); };

    if (g.num_nodes < 2) {
        add("graph needs at least input and output nodes");
        return report;
    }
    if (static_cast<int>(g.ops.size()) != g.num_nodes ||
        g.adj.size() != static_cast<std::size_t>(g.num_nodes) * g.num_nodes) {
        add("malformed buffers: ops/adjacency sizes do not match node count");
        return report;
    }
    for (int i = 0; i < g.num_nodes; ++i) {
        for (int j = 0; j <= i; ++j) {
            if (g.adj[static_cast<std::size_t>(i) * g.num_nodes + j]) {
                add("lower-triangular edge (" + std::to_string(i) + "," + std::to_string(j) + ")");
            }
        }
    }
    for (int i = 0; i < g.num_nodes; ++i) {
        if (g.ops[i] < 0 || g.ops[i] >= vocab.size()) {
            add("node " + std::to_string(i) + ": op kind out of vocabulary");
            return report;
        }
    }
    if (g.ops[0] != vocab.input) add("missing input at node 0");
    if (g.ops[g.num_nodes - 1] != vocab.output) {
        add("missing output at node " + std::to_string(g.num_nodes - 1));
    }
    for (int i = 1; i < g.num_nodes - 1; ++i) {
        if (g.ops[i] == vocab.input) add("duplicated input at node " + std::to_string(i));
        if (g.ops[i] == vocab.output) add("duplicated output at node " + std::to_string(i));
    }
    if (!report.ok()) return report;

    const auto fwd = reachable_from_input(g);
    const auto bwd = reaches_output(g);
    if (!fwd[g.num_nodes - 1]) add("input cannot reach output");
    for (int v = 1; v < g.num_nodes - 1; ++v) {
        const bool on_path = fwd[v] && bwd[v];
        if (g.ops[v] == vocab.isolated) {
            bool shape_ok = g.edge(0, v);
            for (int u = 1; u < g.num_nodes && shape_ok; ++u) {
                if (u != v && g.edge(u, v)) shape_ok = false;
            }
            for (int w = 0; w < g.num_nodes && shape_ok; ++w) {
                if (g.edge(v, w)) shape_ok = false;
            }
            if (!shape_ok) {
                add("isolated node malformed (node " + std::to_string(v) +
                    " must have exactly the input edge and no outgoing edges)");
            }
        } else if (!on_path) {
            add("isolated node unmarked (node " + std::to_string(v) +
                " lies on no input-to-output path)");
        }
    }
    return report;
}

ArchGraph insert_isolated_nodes(const ArchGraph& g, int target_size, const OpVocab& vocab) {
    if (g.num_nodes > target_size) {
        throw SizeError("graph has " + std::to_string(g.num_nodes) + " nodes, target is " +
                        std::to_string(target_size));
    }
    ArchGraph out;
    out.num_nodes = target_size;
    out.adj.assign(static_cast<std::size_t>(target_size) * target_size, 0);
    out.ops.assign(target_size, vocab.isolated);

    // Keep input/output at the boundary slots; original interior nodes keep
    // their order, padding slots are appended just before the output.
    std::vector<int> where(g.num_nodes);
    where[0] = 0;
    for (int v = 1; v < g.num_nodes - 1; ++v) where[v] = v;
    where[g.num_nodes - 1] = target_size - 1;
    out.ops[0] = g.ops[0];
    out.ops[target_size - 1] = g.ops[g.num_nodes - 1];
    for (int v = 1; v < g.num_nodes - 1; ++v) out.ops[v] = g.ops[v];
    for (int u = 0; u < g.num_nodes; ++u) {
        for (int v = 0; v < g.num_nodes; ++v) {
            if (g.edge(u, v)) out.set_edge(where[u], where[v], true);
        }
    }

    const auto fwd = reachable_from_input(out);
    const auto bwd = reaches_output(out);
    for (int v = 1; v < target_size - 1; ++v) {
        if (fwd[v] && bwd[v]) continue;
        for (int u = 0; u < target_size; ++u) {
            out.set_edge(u, v, false);
            out.set_edge(v, u, false);
        }
        out.ops[v] = vocab.isolated;
        out.set_edge(0, v, true);
    }
    return out;
}

ArchGraph prune_extraneous(const ArchGraph& g) {
    const auto fwd = reachable_from_input(g);
    const auto bwd = reaches_output(g);
    if (!fwd[g.num_nodes - 1]) throw NoPathError();

    std::vector<int> keep;
    for (int v = 0; v < g.num_nodes; ++v) {
        if (fwd[v] && bwd[v]) keep.push_back(v);
    }
    ArchGraph out;
    out.num_nodes = static_cast<int>(keep.size());
    out.adj.assign(static_cast<std::size_t>(out.num_nodes) * out.num_nodes, 0);
    out.ops.resize(out.num_nodes);
    for (int i = 0; i < out.num_nodes; ++i) out.ops[i] = g.ops[keep[i]];
    for (int i = 0; i < out.num_nodes; ++i) {
        for (int j = 0; j < out.num_nodes; ++j) {
            if (g.edge(keep[i], keep[j])) out.set_edge(i, j, true);
        }
    }
    return out;
}

namespace {

std::uint64_t hash_sorted(std::vector<std::uint64_t> v, std::uint64_t salt) {
    std::sort(v.begin(), v.end());
    std::uint64_t h = mix64(salt, v.size());
    for (std::uint64_t x : v) h = mix64(h, x);
    return h;
}

// One refinement pass per node count; labels depend only on op kinds, the
// input/output roles, and the directed neighborhood structure.
std::vector<std::uint64_t> refinement_labels(const ArchGraph& g) {
    const int n = g.num_nodes;
    std::vector<std::uint64_t> label(n);
    for (int v = 0; v < n; ++v) {
        label[v] = mix64(0x6f70ULL, static_cast<std::uint64_t>(g.ops[v]),
                         (v == 0 ? 1ULL : 0ULL) | (v == n - 1 ? 2ULL : 0ULL));
    }
    std::vector<std::uint64_t> next(n);
    for (int round = 0; round < n; ++round) {
        for (int v = 0; v < n; ++v) {
            std::vector<std::uint64_t> in, out;
            for (int u = 0; u < n; ++u) {
                if (g.edge(u, v)) in.push_back(label[u]);
                if (g.edge(v, u)) out.push_back(label[u]);
            }
            next[v] = mix64(mix64(label[v], hash_sorted(std::move(in), 0x696eULL)),
                            hash_sorted(std::move(out), 0x6f7574ULL));
        }
        label.swap(next);
    }
    return label;
}

}  // namespace

GraphKey canonical_key(const ArchGraph& g) {
    const auto label = refinement_labels(g);
    std::vector<std::uint64_t> nodes(label.begin(), label.end());
    std::vector<std::uint64_t> edges;
    for (int u = 0; u < g.num_nodes; ++u) {
        for (int v = 0; v < g.num_nodes; ++v) {
            if (g.edge(u, v)) edges.push_back(mix64(label[u], label[v]));
        }
    }
    std::uint64_t h = mix64(0x6b6579ULL, static_cast<std::uint64_t>(g.num_nodes));
    h = mix64(h, hash_sorted(std::move(nodes), 0x6eULL));
    h = mix64(h, hash_sorted(std::move(edges), 0x65ULL));
    return GraphKey{h};
}

ArchGraph canonical_relabel(const ArchGraph& g) {
    const auto label = refinement_labels(g);
    std::vector<int> interior;
    for (int v = 1; v < g.num_nodes - 1; ++v) interior.push_back(v);
    std::stable_sort(interior.begin(), interior.end(),
                     [&](int a, int b) { return label[a] < label[b]; });
    std::vector<int> final_order;
    final_order.push_back(0);
    final_order.insert(final_order.end(), interior.begin(), interior.end());
    final_order.push_back(g.num_nodes - 1);

    std::vector<int> pos(g.num_nodes);
    for (int i = 0; i < g.num_nodes; ++i) pos[final_order[i]] = i;
    ArchGraph out;
    out.num_nodes = g.num_nodes;
    out.adj.assign(g.adj.size(), 0);
    out.ops.resize(g.num_nodes);
    for (int v = 0; v < g.num_nodes; ++v) out.ops[pos[v]] = g.ops[v];
    for (int u = 0; u < g.num_nodes; ++u) {
        for (int v = 0; v < g.num_nodes; ++v) {
            if (g.edge(u, v)) out.set_edge(pos[u], pos[v], true);
        }
    }
    return out;
}

namespace {

void path_dfs(const ArchGraph& g, int u, std::vector<int>& seq,
              std::vector<std::vector<int>>& out) {
    if (u == g.num_nodes - 1) {
        out.push_back(seq);
        return;
    }
    for (int v = 0; v < g.num_nodes; ++v) {
        if (!g.edge(u, v)) continue;
        if (v == g.num_nodes - 1) {
            out.push_back(seq);
        } else {
            seq.push_back(g.ops[v]);
            path_dfs(g, v, seq, out);
            seq.pop_back();
        }
    }
}

}  // namespace

std::vector<std::vector<int>> enumerate_path_multiset(const ArchGraph& g) {
    std::vector<std::vector<int>> out;
    std::vector<int> seq;
    if (g.num_nodes < 2) return out;
    // Start the walk at the input node; interior ops accumulate along the way.
    for (int v = 0; v < g.num_nodes; ++v) {
        if (!g.edge(0, v)) continue;
        if (v == g.num_nodes - 1) {
            out.push_back({});
        } else {
            seq.push_back(g.ops[v]);
            path_dfs(g, v, seq, out);
            seq.pop_back();
        }
    }
    return out;
}

std::vector<std::vector<int>> enumerate_paths(const ArchGraph& g) {
    auto out = enumerate_path_multiset(g);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

PathEncoding path_encode(const ArchGraph& g, const PathUniverse& universe) {
    PathEncoding enc;
    enc.universe_id = universe.universe_id;
    enc.bits.assign(universe.size(), 0);
    for (const auto& seq : enumerate_paths(g)) {
        auto it = universe.index_of.find(seq);
        if (it == universe.index_of.end()) {
            std::string repr = "(";
            for (std::size_t i = 0; i < seq.size(); ++i) {
                if (i) repr += ",";
                repr += std::to_string(seq[i]);
            }
            repr += ")";
            throw UnknownPathError("path " + repr + " is not in the universe");
        }
        enc.bits[static_cast<std::size_t>(it->second)] = 1;
    }
    return enc;
}

ArchGraph convert_edge_op_cell(const EdgeOpCell& cell, const OpVocab& vocab) {
    // DAG check over sum nodes via Kahn's algorithm.
    const int s = cell.num_sum_nodes;
    std::vector<int> indeg(s, 0);
    for (const auto& [pair, op] : cell.edge_ops) {
        const auto [from, to] = pair;
        if (from < 0 || from >= s || to < 0 || to >= s || from == to) {
            throw SizeError("edge-op endpoints out of range");
        }
        if (!vocab.is_interior(op)) throw SizeError("edge op must be an interior kind");
        indeg[to]++;
    }
    std::vector<int> queue;
    for (int v = 0; v < s; ++v) {
        if (indeg[v] == 0) queue.push_back(v);
    }
    int seen = 0;
    std::vector<int> deg = indeg;
    while (!queue.empty()) {
        int u = queue.back();
        queue.pop_back();
        ++seen;
        for (const auto& [pair, op] : cell.edge_ops) {
            if (pair.first == u && --deg[pair.second] == 0) queue.push_back(pair.second);
        }
    }
    if (seen != s) throw CycleError();

    // Node order: input, one node per edge op in (from,to) order, output.
    // (from,to) lexicographic order keeps the adjacency upper triangular.
    std::vector<std::pair<int, int>> keys;
    for (const auto& [pair, op] : cell.edge_ops) keys.push_back(pair);
    std::sort(keys.begin(), keys.end());

    const int n = static_cast<int>(keys.size()) + 2;
    std::vector<int> ops(n, vocab.isolated);
    ops[0] = vocab.input;
    ops[n - 1] = vocab.output;
    for (int i = 0; i < static_cast<int>(keys.size()); ++i) {
        ops[i + 1] = cell.edge_ops.at(keys[i]);
    }
    ArchGraph out(n, ops);
    for (int i = 0; i < static_cast<int>(keys.size()); ++i) {
        const auto [from, to] = keys[i];
        if (from == 0) out.set_edge(0, i + 1, true);
        if (to == s - 1) out.set_edge(i + 1, n - 1, true);
        for (int j = 0; j < static_cast<int>(keys.size()); ++j) {
            if (keys[j].first == to) out.set_edge(i + 1, j + 1, true);
        }
    }
    return out;
}

ArchGraph compose_cell_pair(const ArchGraph& normal, const ArchGraph& reduction) {
    if (normal.num_nodes != reduction.num_nodes) {
        throw SizeError("size mismatch: cells have " + std::to_string(normal.num_nodes) + " and " +
                        std::to_string(reduction.num_nodes) + " nodes");
    }
    const int n = normal.num_nodes;
    ArchGraph out;
    out.num_nodes = 2 * n;
    out.adj.assign(static_cast<std::size_t>(2 * n) * (2 * n), 0);
    out.ops.resize(2 * n);
    for (int v = 0; v < n; ++v) {
        out.ops[v] = normal.ops[v];
        out.ops[n + v] = reduction.ops[v];
    }
    for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
            if (normal.edge(u, v)) out.set_edge(u, v, true);
            if (reduction.edge(u, v)) out.set_edge(n + u, n + v, true);
        }
    }
    out.set_edge(n - 1, n, true);  // reduction input follows normal output
    return out;
}

std::vector<double> flat_adjacency_encoding(const ArchGraph& g, const OpVocab& vocab) {
    std::vector<double> enc;
    enc.reserve(static_cast<std::size_t>(g.num_nodes) * (g.num_nodes - 1) / 2 +
                static_cast<std::size_t>(g.num_nodes) * vocab.size());
    for (int i = 0; i < g.num_nodes; ++i) {
        for (int j = i + 1; j < g.num_nodes; ++j) {
            enc.push_back(g.edge(i, j) ? 1.0 : 0.0);
        }
    }
    for (int v = 0; v < g.num_nodes; ++v) {
        for (int k = 0; k < vocab.size(); ++k) {
            enc.push_back(g.ops[v] == k ? 1.0 : 0.0);
        }
    }
    return enc;
}

void to_json(nlohmann::json& j, const ArchGraph& g) {
    std::vector<int> adj(g.adj.begin(), g.adj.end());
    j = nlohmann::json{{"ops", g.ops}, {"adj", adj}, {"n", g.num_nodes}};
}

void from_json(const nlohmann::json& j, ArchGraph& g) {
    g.num_nodes = j.at("n").get<int>();
    g.ops = j.at("ops").get<std::vector<int>>();
    const auto adj = j.at("adj").get<std::vector<int>>();
    if (static_cast<int>(g.ops.size()) != g.num_nodes ||
        adj.size() != static_cast<std::size_t>(g.num_nodes) * g.num_nodes) {
        throw SizeError("arch json: inconsistent sizes");
    }
    g.adj.assign(adj.begin(), adj.end());
    for (auto b : g.adj) {
        if (b != 0 && b != 1) throw SizeError("arch json: adjacency entries must be 0/1");
    }
}

}  // namespace npenas
