#include "pgsam/tensor_util.hpp"

#include <string>

namespace pgsam {

torch::Tensor to_tensor(const Image& img) {
    auto t = torch::empty({static_cast<int64_t>(img.rows()), static_cast<int64_t>(img.cols())},
                          torch::kFloat32);
    std::copy(img.values().begin(), img.values().end(), t.data_ptr<float>());
    return t;
}

torch::Tensor to_tensor(const BinaryGrid& g) {
    auto t = torch::empty({static_cast<int64_t>(g.rows()), static_cast<int64_t>(g.cols())},
                          torch::kFloat32);
    float* out = t.data_ptr<float>();
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = g.values()[i] ? 1.0f : 0.0f;
    return t;
}

torch::Tensor to_tensor(const data::MultiSequenceSlice& slice) {
    std::vector<torch::Tensor> chans;
    chans.reserve(slice.channels.size());
    for (const auto& c : slice.channels) chans.push_back(to_tensor(c));
    return torch::stack(chans);
}

Image to_image(const torch::Tensor& t) {
    if (t.dim() != 2) throw ContractViolation("to_image: expected a 2D tensor");
    auto c = t.detach().to(torch::kFloat32).contiguous();
    Image img(c.size(0), c.size(1));
    std::copy(c.data_ptr<float>(), c.data_ptr<float>() + c.numel(), img.values().begin());
    return img;
}

BinaryGrid to_binary(const torch::Tensor& t, double threshold) {
    auto img = to_image(t);
    BinaryGrid g(img.rows(), img.cols());
    for (std::size_t i = 0; i < img.size(); ++i) g.values()[i] = img.values()[i] >= threshold ? 1 : 0;
    return g;
}

void check_finite(const torch::Tensor& t, const char* what) {
    if (!torch::isfinite(t).all().item<bool>())
        throw NumericalError(std::string(what) + ": non-finite values");
}

}  // namespace pgsam
