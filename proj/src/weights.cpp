#include "pgsam/weights.hpp"

#include <fstream>
#include <sstream>

#include "pgsam/grid.hpp"
#include "pgsam/io.hpp"

namespace fs = std::filesystem;

namespace pgsam::weights {

namespace {

fs::path with_suffix(const fs::path& stem, const char* suffix) {
    fs::path p = stem;
    p += suffix;
    return p;
}

std::string shape_string(const torch::Tensor& t) {
    if (t.dim() == 0) return "scalar";
    std::string s;
    for (int64_t i = 0; i < t.dim(); ++i) s += (i ? "x" : "") + std::to_string(t.size(i));
    return s;
}

}  // namespace

void write_bundle(const fs::path& stem, const NamedTensors& tensors) {
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    std::ofstream man(with_suffix(stem, ".manifest"));
    std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary);
    if (!man || !bin) throw std::runtime_error("cannot write tensor bundle " + stem.string());
    man << "pgsam-tensors 1\n";
    for (const auto& [key, t] : tensors) {
        man << key << ' ' << shape_string(t) << '\n';
        auto c = t.detach().to(torch::kFloat32).contiguous();
        io::write_f32(bin, c.data_ptr<float>(), static_cast<std::size_t>(c.numel()));
    }
}

std::vector<std::pair<std::string, std::vector<int64_t>>> read_manifest(const fs::path& stem) {
    std::ifstream man(with_suffix(stem, ".manifest"));
    if (!man) throw ValidationError("missing manifest " + with_suffix(stem, ".manifest").string());
    std::string line;
    if (!std::getline(man, line) || line != "pgsam-tensors 1")
        throw ValidationError("unrecognised manifest header in " + stem.string());
    std::vector<std::pair<std::string, std::vector<int64_t>>> out;
    while (std::getline(man, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key, shape;
        if (!(ls >> key >> shape)) throw ValidationError("malformed manifest line: " + line);
        std::vector<int64_t> dims;
        if (shape != "scalar") {
            std::istringstream ds(shape);
            std::string d;
            while (std::getline(ds, d, 'x')) dims.push_back(std::stoll(d));
        }
        out.emplace_back(key, std::move(dims));
    }
    return out;
}

NamedTensors read_bundle(const fs::path& stem) {
    const auto table = read_manifest(stem);
    std::ifstream bin(with_suffix(stem, ".bin"), std::ios::binary);
    if (!bin) throw ValidationError("missing payload " + with_suffix(stem, ".bin").string());
    NamedTensors out;
    for (const auto& [key, dims] : table) {
        auto t = torch::empty(dims, torch::kFloat32);
        io::read_f32(bin, t.data_ptr<float>(), static_cast<std::size_t>(t.numel()));
        out.emplace_back(key, std::move(t));
    }
    return out;
}

}  // namespace pgsam::weights
