#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "convert.hpp"
#include "model.hpp"
#include "oracles.hpp"
#include "runtime.hpp"
#include "topology.hpp"

using namespace ernn;
using namespace ernn::modelio;

namespace {

TopologyConfig tiny_topology(cells::CellKind kind = cells::CellKind::lstm, bool ln = true) {
    TopologyConfig t;
    t.feature_width = 6;
    t.embedding_width = 4;
    t.vocab_size = 16;
    t.joint_hidden = 8;
    LayerSpec l;
    l.kind = kind;
    l.hidden = 16;
    l.proj = 8;
    l.layer_norm = ln;
    t.encoder.assign(2, l);
    t.encoder[0].input = 6;
    t.encoder[1].input = 8;
    t.prediction.assign(1, l);
    t.prediction[0].input = 4;
    return t;
}

std::vector<uint8_t> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("baseline parameter counts reproduce the published table") {
    auto lstm = baseline_topology();
    auto counts = count_params(lstm);
    // 122.1M total at 0% sparsity
    CHECK(std::fabs(double(counts.total()) / 122.1e6 - 1.0) < 0.03);

    for (auto [sparsity, target] : {std::pair{0.5, 69.7e6}, {0.7, 48.7e6}, {0.8, 38.2e6}}) {
        auto sparse = baseline_topology(cells::CellKind::lstm, sparsity);
        CHECK(std::fabs(double(count_params(sparse).total()) / target - 1.0) < 0.03);
    }

    auto cifg = baseline_topology(cells::CellKind::cifg);
    CHECK(std::fabs(double(count_params(cifg).total()) / 95.8e6 - 1.0) < 0.03);
    auto sparse_cifg = baseline_topology(cells::CellKind::cifg, 0.5);
    CHECK(std::fabs(double(count_params(sparse_cifg).total()) / 56.3e6 - 1.0) < 0.03);
}

TEST_CASE("layer parameter formulas") {
    LayerSpec l;
    l.kind = cells::CellKind::lstm;
    l.input = 32;
    l.hidden = 64;
    l.proj = 16;
    l.layer_norm = false;
    // 4h(in + p) + 4h + ph
    CHECK(layer_params(l).total == 4 * 64 * (32 + 16) + 4 * 64 + 16 * 64);
    l.layer_norm = true;
    CHECK(layer_params(l).total == 4 * 64 * (32 + 16) + 4 * 64 + 8 * 64 + 16 * 64);

    l.kind = cells::CellKind::cifg;
    l.layer_norm = false;
    CHECK(layer_params(l).total == 3 * 64 * (32 + 16) + 3 * 64 + 16 * 64);

    l.kind = cells::CellKind::sru;
    CHECK(layer_params(l).total == 4 * 64 * 32 + 4 * 64 + 16 * 64);

    // 50% sparsity halves the W/R mass exactly (block counts divide evenly)
    l.kind = cells::CellKind::lstm;
    l.sparsity = 0.5;
    l.block_rows = 16;
    l.block_cols = 1;
    CHECK(layer_params(l).retained_wr == 4 * 64 * (32 + 16) / 2);
}

TEST_CASE("topology text round-trip and validation") {
    auto t = tiny_topology();
    t.encoder[1].sparsity = 0.5;
    auto text = serialize_topology(t);
    auto back = parse_topology(text);
    CHECK(serialize_topology(back) == text);
    CHECK(back.encoder.size() == 2);
    CHECK(back.encoder[1].sparsity == 0.5);
    CHECK(back.prediction[0].input == 4);

    // count shorthand expands
    auto multi = parse_topology(
        "feature_width = 8\nembedding_width = 4\nvocab_size = 8\njoint_hidden = 4\n"
        "[encoder]\nlstm input=8 hidden=16 proj=8 ln=0 count=3\n"
        "[prediction]\nsru input=4 hidden=16 proj=8 ln=0\n");
    CHECK(multi.encoder.size() == 3);
    CHECK(multi.encoder[1].input == 8);
    CHECK(multi.prediction[0].kind == cells::CellKind::sru);

    // broken chaining is rejected
    CHECK_THROWS_AS(parse_topology("feature_width = 8\nembedding_width = 4\nvocab_size = 8\n"
                                   "joint_hidden = 4\n[encoder]\nlstm input=9 hidden=16 proj=8\n"
                                   "[prediction]\nlstm input=4 hidden=16 proj=8\n"),
                    Error);
}

TEST_CASE("model save/load round-trips bitwise in all five storage modes") {
    std::string path_a = "/tmp/ernn_test_model_a.ernn";
    std::string path_b = "/tmp/ernn_test_model_b.ernn";

    auto t = tiny_topology();
    auto m = make_random_model(t, 7);

    // float dense, float sparse, hybrid dense, hybrid sparse, integer dense
    std::vector<Model> variants;
    variants.push_back(m);
    pruning::PruneTargets targets;
    targets.encoder = 0.5;
    targets.prediction = 0.25;
    targets.block_rows = 16;
    targets.block_cols = 1;
    auto pruned = pruning::prune_model(m, targets);
    variants.push_back(pruned);
    variants.push_back(quant::convert_to_hybrid(m));
    variants.push_back(quant::convert_to_hybrid(pruned));
    {
        // integer conversion needs stats: synthesize from a quick float pass
        runtime::Utterance u;
        u.features = Matrix(12, t.feature_width);
        SplitMix64 rng(3);
        for (auto& v : u.features.data) {
            v = float(rng.uniform(-1.0, 1.0));
        }
        auto obs = runtime::calibrate_model(m, std::span(&u, 1));
        variants.push_back(quant::convert_to_integer(m, obs));
        variants.push_back(quant::convert_to_integer(pruned, obs));
    }

    for (const auto& variant : variants) {
        save(variant, path_a);
        auto loaded = load(path_a);
        CHECK(loaded.mode == variant.mode);
        CHECK(loaded.tensors.size() == variant.tensors.size());
        save(loaded, path_b);
        CHECK(slurp(path_a) == slurp(path_b));

        // estimated size matches the actual file within 2%
        double actual = double(slurp(path_a).size());
        double estimate = double(file_size_estimate(variant.topology, variant.mode));
        CHECK(std::fabs(estimate - actual) / actual <= 0.02);
    }
    std::remove(path_a.c_str());
    std::remove(path_b.c_str());
}

TEST_CASE("load failure kinds are distinct") {
    std::string path = "/tmp/ernn_test_model_err.ernn";
    auto m = make_random_model(tiny_topology(), 9);
    save(m, path);

    auto bytes = slurp(path);

    // wrong magic
    {
        auto bad = bytes;
        bad[0] = 'X';
        std::ofstream(path, std::ios::binary)
            .write(reinterpret_cast<const char*>(bad.data()), bad.size());
        try {
            load(path);
            FAIL("expected error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::format);
        }
    }
    // unsupported version
    {
        auto bad = bytes;
        bad[4] = 99;
        std::ofstream(path, std::ios::binary)
            .write(reinterpret_cast<const char*>(bad.data()), bad.size());
        try {
            load(path);
            FAIL("expected error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::version);
        }
    }
    // truncation breaks the checksum
    {
        auto bad = bytes;
        bad.resize(bad.size() - 9);
        std::ofstream(path, std::ios::binary)
            .write(reinterpret_cast<const char*>(bad.data()), bad.size());
        try {
            load(path);
            FAIL("expected error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::checksum);
        }
    }
    // flipped payload byte breaks the checksum
    {
        auto bad = bytes;
        bad[bad.size() / 2] ^= 0x40;
        std::ofstream(path, std::ios::binary)
            .write(reinterpret_cast<const char*>(bad.data()), bad.size());
        try {
            load(path);
            FAIL("expected error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::checksum);
        }
    }
    // missing tensor
    {
        auto copy = m;
        copy.tensors.erase("enc0.W_i");
        save(copy, path);
        try {
            load(path);
            FAIL("expected error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::missing_tensor);
            CHECK(std::string(e.what()).find("enc0.W_i") != std::string::npos);
        }
    }
    std::remove(path.c_str());
}

TEST_CASE("count_params is unchanged by quantization") {
    auto t = tiny_topology();
    auto counts = count_params(t);
    // same topology regardless of mode; bytes differ, parameters do not
    CHECK(counts.total() == count_params(t).total());
    auto m = make_random_model(t, 5);
    auto hybrid = quant::convert_to_hybrid(m);
    CHECK(count_params(hybrid.topology).total() == counts.total());
}

TEST_CASE("pruned model stores exact sparsity and survives conversion") {
    auto t = tiny_topology(cells::CellKind::lstm, false);
    auto m = make_random_model(t, 11);
    pruning::PruneTargets targets;
    targets.encoder = 0.5;
    targets.prediction = 0.0;
    auto pruned = pruning::prune_model(m, targets);

    const auto& w = pruned.tensor("enc0.W_i");
    CHECK(w.sparse);
    auto sp = sparse_from_tensor(w);
    CHECK(blocksparse::sparsity(sp) == doctest::Approx(0.5).epsilon(0.2));
    // prediction untouched
    CHECK_FALSE(pruned.tensor("dec0.W_i").sparse);

    auto hybrid = quant::convert_to_hybrid(pruned);
    const auto& hw = hybrid.tensor("enc0.W_i");
    CHECK(hw.sparse);
    CHECK(hw.dtype == DType::i8);
    // ledger survives quantization untouched
    CHECK(hw.ledger == w.ledger);
}

TEST_CASE("memory accounting: sparse payload matches the stored formula") {
    SplitMix64 rng(167);
    Matrix w = oracle::random_matrix(rng, 64, 32);
    auto mask = pruning::compute_block_mask(w, 0.4, 16, 1);
    auto masked = pruning::apply_mask(w, mask, 16, 1);
    auto sparse = blocksparse::from_dense(masked, 16, 1);
    auto tensor = Tensor::from_sparse(sparse);
    size_t expected_payload = sparse.stored_blocks() * 16 * 1 * sizeof(float);
    CHECK(tensor.bytes.size() == expected_payload);
    CHECK(tensor.ledger.size() == size_t(sparse.grid_rows()) + sparse.stored_blocks());
}
