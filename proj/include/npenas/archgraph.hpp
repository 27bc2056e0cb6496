#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace npenas {

struct NoPathError : std::runtime_error {
    NoPathError() : std::runtime_error("input cannot reach output") {}
};
struct UnknownPathError : std::runtime_error {
    explicit UnknownPathError(const std::string& what) : std::runtime_error(what) {}
};
struct CycleError : std::runtime_error {
    CycleError() : std::runtime_error("edge-op cell contains a cycle") {}
};
struct SizeError : std::runtime_error {
    explicit SizeError(const std::string& what) : std::runtime_error(what) {}
};

// Operation vocabulary of a search space. Always contains exactly one
// "input", one "output" and one "isolated" kind; the rest are the real
// layer operations.
struct OpVocab {
    std::vector<std::string> names;
    int input = -1;
    int output = -1;
    int isolated = -1;

    // Vocabulary laid out as [input, output, isolated, interior...].
    static OpVocab with_interior(const std::vector<std::string>& interior_names);
    static OpVocab from_names(const std::vector<std::string>& names);

    int size() const { return static_cast<int>(names.size()); }
    bool is_interior(int kind) const {
        return kind >= 0 && kind < size() && kind != input && kind != output && kind != isolated;
    }
    std::vector<int> interior_kinds() const;
};

// A cell architecture: DAG over typed operation nodes. Node 0 is the input,
// node num_nodes-1 the output; adjacency is strictly upper triangular so the
// node order is already topological.
struct ArchGraph {
    int num_nodes = 0;
    std::vector<std::uint8_t> adj;  // row-major num_nodes x num_nodes, 0/1
    std::vector<int> ops;           // kind ids, one per node

    ArchGraph() = default;
    ArchGraph(int n, std::vector<int> node_ops);

    bool edge(int u, int v) const { return adj[static_cast<std::size_t>(u) * num_nodes + v] != 0; }
    void set_edge(int u, int v, bool on) {
        adj[static_cast<std::size_t>(u) * num_nodes + v] = on ? 1 : 0;
    }
    int edge_count() const;

    bool operator==(const ArchGraph& other) const {
        return num_nodes == other.num_nodes && adj == other.adj && ops == other.ops;
    }
};

struct GraphKey {
    std::uint64_t digest = 0;

    std::string hex() const;
    static GraphKey from_hex(const std::string& hex);

    bool operator==(const GraphKey& o) const { return digest == o.digest; }
    bool operator!=(const GraphKey& o) const { return digest != o.digest; }
    bool operator<(const GraphKey& o) const { return digest < o.digest; }
};

struct GraphKeyHash {
    std::size_t operator()(const GraphKey& k) const { return static_cast<std::size_t>(k.digest); }
};

struct ValidationReport {
    std::vector<std::string> violations;
    bool ok() const { return violations.empty(); }
};

// The fixed, lexicographically ordered set of interior-op sequences a space
// can realize on input-to-output paths.
struct PathUniverse {
    std::vector<std::vector<int>> seqs;  // sorted lexicographically by kind id
    std::map<std::vector<int>, int> index_of;
    std::uint64_t universe_id = 0;

    static PathUniverse from_sequences(std::vector<std::vector<int>> seqs);
    std::size_t size() const { return seqs.size(); }
};

struct PathEncoding {
    std::vector<std::uint8_t> bits;
    std::uint64_t universe_id = 0;

    int popcount() const;
};

// Edge-operation cell: operations live on edges between summation nodes
// (NASBench-201 / DARTS style). Sum node 0 is the cell input, the highest
// index the cell output.
struct EdgeOpCell {
    int num_sum_nodes = 0;
    std::map<std::pair<int, int>, int> edge_ops;  // (from,to) -> op kind
};

// Structural + role validation. Never throws; all problems are reported.
ValidationReport validate(const ArchGraph& g, const OpVocab& vocab);

// Normalization: pads the graph to target_size, re-types every interior node
// that lies on no input-to-output path as "isolated", strips its edges and
// wires it from the input node. The result always validates cleanly when the
// input can reach the output.
ArchGraph insert_isolated_nodes(const ArchGraph& g, int target_size, const OpVocab& vocab);

// Subgraph of nodes on at least one input-to-output path, re-indexed in the
// original (topological) order. Throws NoPathError when input and output are
// disconnected.
ArchGraph prune_extraneous(const ArchGraph& g);

// Isomorphism-invariant digest: iterated neighborhood label refinement over
// num_nodes rounds, seeded by (op kind, input role, output role).
GraphKey canonical_key(const ArchGraph& g);

// Relabels nodes into a canonical order (input first, interior sorted by the
// refinement labels behind canonical_key, output last). Isomorphic graphs map
// to bitwise-identical results.
ArchGraph canonical_relabel(const ArchGraph& g);

// All input-to-output paths as interior op-kind sequences, duplicates
// collapsed, sorted lexicographically.
std::vector<std::vector<int>> enumerate_paths(const ArchGraph& g);

// Same, but one sequence per path (duplicates kept, in DFS order).
std::vector<std::vector<int>> enumerate_path_multiset(const ArchGraph& g);

PathEncoding path_encode(const ArchGraph& g, const PathUniverse& universe);

// Converts an edge-op cell to the node-op form: one node per edge operation
// plus input/output nodes, edges between consecutive operations.
ArchGraph convert_edge_op_cell(const EdgeOpCell& cell, const OpVocab& vocab);

// Block composition of two equally sized cells: `normal` in the upper-left,
// `reduction` in the bottom-right, one edge from normal's output node to
// reduction's input node.
ArchGraph compose_cell_pair(const ArchGraph& normal, const ArchGraph& reduction);

// Flattened vector encoding: upper-triangular adjacency bits followed by the
// per-node one-hot op encoding.
std::vector<double> flat_adjacency_encoding(const ArchGraph& g, const OpVocab& vocab);

// Reachability over the directed edges (index 0 = reachable from input,
// index 1 = reaches output), as 0/1 flags per node.
std::vector<std::uint8_t> reachable_from_input(const ArchGraph& g);
std::vector<std::uint8_t> reaches_output(const ArchGraph& g);

// JSON form {"ops": [...], "adj": [... row-major ...], "n": N}.
void to_json(nlohmann::json& j, const ArchGraph& g);
void from_json(const nlohmann::json& j, ArchGraph& g);

}  // namespace npenas
