#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dimr/config.hpp"
#include "dimr/image.hpp"
#include "dimr/io.hpp"

using namespace dimr;

TEST_CASE("tensor format round-trips both dtypes") {
    Rng rng(1);
    Tensor<float> f = randn<float>({2, 3, 4}, rng);
    std::ostringstream os(std::ios::binary);
    write_tensor(os, f);
    std::istringstream is(os.str(), std::ios::binary);
    Tensor<float> f2 = read_tensor<float>(is);
    CHECK(f2.shape == f.shape);
    CHECK(f2.data == f.data);

    Tensor<double> d = randn<double>({5}, rng);
    std::ostringstream os2(std::ios::binary);
    write_tensor(os2, d);
    std::istringstream is2(os2.str(), std::ios::binary);
    CHECK(read_tensor<double>(is2).data == d.data);
}

TEST_CASE("tensor format carries the header fields") {
    Tensor<float> t(Shape{1, 2}, std::vector<float>{1.5f, -2.0f});
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    std::string bytes = os.str();
    CHECK(bytes.substr(0, 5) == "DIMRT");
    CHECK(bytes[5] == 1); // version
    CHECK(bytes[6] == 0); // f32 dtype code
    // rank u32 little-endian
    CHECK(uint8_t(bytes[7]) == 2);
    // payload: 5 magic + 1 ver + 1 dtype + 4 rank + 16 extents + 8 data
    CHECK(bytes.size() == 5 + 1 + 1 + 4 + 16 + 8);
}

TEST_CASE("tensor read rejects bad magic and truncation") {
    std::istringstream bad("NOPE!xxxxxxx", std::ios::binary);
    CHECK_THROWS_AS(read_tensor<float>(bad), IoError);

    Tensor<float> t(Shape{4}, std::vector<float>{1, 2, 3, 4});
    std::ostringstream os(std::ios::binary);
    write_tensor(os, t);
    std::string cut = os.str().substr(0, os.str().size() - 5);
    std::istringstream trunc(cut, std::ios::binary);
    CHECK_THROWS_AS(read_tensor<float>(trunc), IoError);
}

TEST_CASE("archive keeps order, manifest, and survives a round trip") {
    namespace fs = std::filesystem;
    Rng rng(2);
    TensorArchive<float> a;
    a.manifest = "k = v\n";
    a.add("b.first", randn<float>({3}, rng));
    a.add("a.second", randn<float>({2, 2}, rng));
    fs::path p = fs::temp_directory_path() / "dimr_archive_test.bin";
    a.save(p.string());
    auto b = TensorArchive<float>::load(p.string());
    CHECK(b.manifest == a.manifest);
    REQUIRE(b.entries.size() == 2);
    CHECK(b.entries[0].first == "b.first"); // insertion order, not sorted
    CHECK(b.entries[1].second.data == a.entries[1].second.data);
    CHECK(b.find("a.second") != nullptr);
    CHECK(b.find("missing") == nullptr);
    fs::remove(p);
}

TEST_CASE("kv config: parsing, comments, overrides, unknown keys") {
    KvConfig c = KvConfig::parse("# comment\n a = 1 \n\nb.c = hello world\n");
    CHECK(c.get_int("a", 0) == 1);
    CHECK(c.get_or("b.c", "") == "hello world");
    c.apply_override("a=2");
    CHECK(c.get_int("a", 0) == 2);
    c.apply_override("new.key = 3.5");
    CHECK(c.get_double("new.key", 0) == 3.5);

    CHECK_THROWS_AS(KvConfig::parse("not a pair\n"), ConfigError);
    CHECK_THROWS_AS(c.apply_override("novalue"), ConfigError);
    CHECK_THROWS_AS(c.get_int("b.c", 0), ConfigError);
    CHECK_THROWS_AS(c.require_known({"a", "b.c"}), ConfigError);
    c.require_known({"a", "b.c", "new.key"});

    // serialization is stable and reparses to the same map
    std::string text = c.serialize();
    CHECK(KvConfig::parse(text).serialize() == text);
}

TEST_CASE("kv config list parsing") {
    KvConfig c = KvConfig::parse("n = 15,8,8\n");
    CHECK(c.get_size_list("n", {}) == std::vector<size_t>{15, 8, 8});
    CHECK_THROWS_AS(KvConfig::parse("n = 1,x\n").get_size_list("n", {}), ConfigError);
}

TEST_CASE("ppm write/read round trip, P5 and P6") {
    namespace fs = std::filesystem;
    fs::path p = fs::temp_directory_path() / "dimr_img_test.ppm";
    Image8 rgb;
    rgb.width = 3;
    rgb.height = 2;
    rgb.channels = 3;
    for (int i = 0; i < 18; ++i) rgb.pixels.push_back(uint8_t(i * 10));
    write_ppm(p.string(), rgb);
    Image8 back = read_ppm(p.string());
    CHECK(back.channels == 3);
    CHECK(back.pixels == rgb.pixels);

    Image8 gray;
    gray.width = 2;
    gray.height = 2;
    gray.channels = 1;
    gray.pixels = {0, 80, 160, 255};
    write_ppm(p.string(), gray);
    back = read_ppm(p.string());
    CHECK(back.channels == 1);
    CHECK(back.pixels == gray.pixels);
    fs::remove(p);
}

TEST_CASE("ascii pgm parses with comments") {
    namespace fs = std::filesystem;
    fs::path p = fs::temp_directory_path() / "dimr_ascii_test.pgm";
    std::ofstream(p) << "P2\n# a comment\n2 2\n255\n0 128\n255 64\n";
    Image8 img = read_ppm(p.string());
    CHECK(img.channels == 1);
    CHECK(img.pixels == std::vector<uint8_t>{0, 128, 255, 64});
    fs::remove(p);
}

TEST_CASE("box resize averages source cells") {
    Image8 img;
    img.width = 4;
    img.height = 4;
    img.channels = 1;
    img.pixels.assign(16, 0);
    // left half 0, right half 200
    for (size_t y = 0; y < 4; ++y)
        for (size_t x = 2; x < 4; ++x) img.pixels[y * 4 + x] = 200;
    Tensor<float> t = box_resize_to<float>(img, 2, 1);
    CHECK(t.shape == Shape{1, 2, 2});
    CHECK(t.data[0] == doctest::Approx(-1.0));                       // all-zero region
    CHECK(t.data[1] == doctest::Approx(2.0 * 200.0 / 255.0 - 1.0));  // all-200 region
}
