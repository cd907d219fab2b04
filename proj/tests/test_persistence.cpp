#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <fstream>

#include "conceptsplit/container.hpp"
#include "conceptsplit/model.hpp"
#include "conceptsplit/rng.hpp"

using namespace csplit;

namespace {

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(),
                       sizeof(double) * static_cast<size_t>(a.size())) == 0;
}

Tensor rand_tensor(Rng& rng, const Shape& s) {
    std::vector<double> v(static_cast<size_t>(shape_size(s)));
    for (double& x : v) x = rng.normal();
    return Tensor::from_data(s, std::move(v));
}

struct TempFile {
    std::string path;
    explicit TempFile(std::string p) : path(std::move(p)) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("container round-trip is bitwise lossless in both modes") {
    for (NumericMode m : {NumericMode::verify, NumericMode::fast}) {
        NumericModeGuard guard(m);
        Rng rng(11);
        TempFile f("container_test.bin");
        nlohmann::ordered_json cfg = {{"kind", "test"}, {"answer", 42}};
        Tensor a = rand_tensor(rng, {3, 4});
        Tensor b = rand_tensor(rng, {7});
        write_container(f.path, cfg, {{"alpha", a}, {"beta", b}});

        Container c = read_container(f.path);
        CHECK(c.config.at("answer") == 42);
        CHECK(bitwise_equal(c.find("alpha"), a));
        CHECK(bitwise_equal(c.find("beta"), b));
        CHECK(c.contains("alpha"));
        CHECK(!c.contains("gamma"));
        CHECK_THROWS_AS(c.find("gamma"), IoError);
    }
}

TEST_CASE("container rejects foreign and future files") {
    NumericModeGuard guard(NumericMode::verify);
    TempFile f("container_bad.bin");

    SUBCASE("bad magic") {
        std::ofstream os(f.path, std::ios::binary);
        os << "NOTACONTAINERATALL";
        os.close();
        CHECK_THROWS_WITH_AS(read_container(f.path), doctest::Contains("magic"),
                             IoError);
    }

    SUBCASE("future version") {
        Rng rng(1);
        write_container(f.path, {{"kind", "test"}}, {{"x", rand_tensor(rng, {2})}});
        // bump the version field (bytes 8..11) past the supported one
        std::fstream fs(f.path, std::ios::binary | std::ios::in | std::ios::out);
        fs.seekp(8);
        const uint32_t future = kContainerVersion + 1;
        fs.write(reinterpret_cast<const char*>(&future), sizeof(future));
        fs.close();
        CHECK_THROWS_WITH_AS(read_container(f.path), doctest::Contains("version"),
                             IoError);
    }

    SUBCASE("truncated file") {
        Rng rng(1);
        write_container(f.path, {{"kind", "test"}}, {{"x", rand_tensor(rng, {64})}});
        std::ifstream is(f.path, std::ios::binary);
        std::string bytes(std::istreambuf_iterator<char>(is), {});
        is.close();
        std::ofstream os(f.path, std::ios::binary | std::ios::trunc);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        os.close();
        CHECK_THROWS_AS(read_container(f.path), IoError);
    }

    SUBCASE("missing file") {
        CHECK_THROWS_AS(read_container("does_not_exist.bin"), IoError);
    }
}

TEST_CASE("model checkpoint round-trip") {
    ModelConfig cfg;
    cfg.latent_h = 8;
    cfg.latent_w = 8;
    cfg.latent_c = 2;
    cfg.model_dim = 16;
    cfg.blocks = 2;
    cfg.heads = 2;
    cfg.text_dim = 16;
    cfg.max_tokens = 8;
    cfg.ffn_dim = 32;
    cfg.train_timesteps = 40;

    for (NumericMode m : {NumericMode::verify, NumericMode::fast}) {
        NumericModeGuard guard(m);
        TempFile f("model_test.ckpt");
        DenoiserModel model = DenoiserModel::init(cfg, 5);
        model.train_steps_done = 123;
        save_model(model, f.path);
        DenoiserModel loaded = load_model(f.path);
        CHECK(loaded.train_steps_done == 123);
        CHECK(loaded.cfg.model_dim == cfg.model_dim);
        std::vector<Tensor*> pa = model.parameters();
        std::vector<Tensor*> pb = loaded.parameters();
        REQUIRE(pa.size() == pb.size());
        for (size_t i = 0; i < pa.size(); ++i) CHECK(bitwise_equal(*pa[i], *pb[i]));

        // loaded models sample identically
        PromptEncoding enc = model.embedder.encode({"a", "red", "square"});
        SamplerOptions opts;
        opts.steps = 4;
        opts.seed = 3;
        CHECK(bitwise_equal(sample(model, enc, opts).latent,
                            sample(loaded, enc, opts).latent));
    }
}

TEST_CASE("checkpoint kind is validated") {
    NumericModeGuard guard(NumericMode::verify);
    TempFile f("kind_test.bin");
    Rng rng(2);
    write_container(f.path, {{"kind", "adapter-db"}}, {{"x", rand_tensor(rng, {2})}});
    CHECK_THROWS_AS(load_model(f.path), IoError);
}
