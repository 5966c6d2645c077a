// Python bindings for the main numeric operations: schedules, forward and
// reverse diffusion steps, quality metrics, embedding math, the budget clip
// and the synthetic dataset generator.

#include <optional>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "advrestore/attack.hpp"
#include "advrestore/dataio.hpp"
#include "advrestore/diffusion.hpp"
#include "advrestore/facerec.hpp"
#include "advrestore/metrics.hpp"

namespace py = pybind11;
using namespace advrestore;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from(const Array& a) {
    std::vector<int> shape;
    for (py::ssize_t d = 0; d < a.ndim(); ++d) shape.push_back(static_cast<int>(a.shape(d)));
    std::vector<double> data(a.data(), a.data() + a.size());
    return Tensor(std::move(shape), std::move(data));
}

Array array_from(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    Array out(shape);
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

// Images arrive as [H,W] or [1,H,W]; internally they are [1,H,W].
Tensor image_from(const Array& a) {
    Tensor t = tensor_from(a);
    if (t.shape.size() == 2) t.shape = {1, t.shape[0], t.shape[1]};
    return t;
}

}  // namespace

PYBIND11_MODULE(advrestore_py, m) {
    m.doc() = "Diffusion-restoration adversarial attack pipeline: core operations";

    py::class_<VarianceSchedule>(m, "VarianceSchedule")
        .def_static("linear", &VarianceSchedule::linear, py::arg("n_steps"), py::arg("beta_start"),
                    py::arg("beta_end"))
        .def_static("from_betas", &VarianceSchedule::from_betas, py::arg("betas"))
        .def_readonly("n_steps", &VarianceSchedule::n_steps)
        .def_readonly("betas", &VarianceSchedule::betas)
        .def_readonly("alphas", &VarianceSchedule::alphas)
        .def_readonly("alpha_bars", &VarianceSchedule::alpha_bars)
        .def("alpha_bar", &VarianceSchedule::alpha_bar, py::arg("r"));

    m.def(
        "q_sample",
        [](const Array& z0, int r, const Array& xi, const VarianceSchedule& sched) {
            return array_from(q_sample(tensor_from(z0), r, tensor_from(xi), sched));
        },
        py::arg("z0"), py::arg("r"), py::arg("xi"), py::arg("sched"));

    m.def("sigma", [](int r, const VarianceSchedule& sched) { return sigma(r, sched); }, py::arg("r"),
          py::arg("sched"));
    m.def("sigma_between", &sigma_between, py::arg("r"), py::arg("r_prev"), py::arg("sched"));

    m.def(
        "ddim_step",
        [](const Array& eps, const Array& z, int r, int r_prev, py::object noise,
           const VarianceSchedule& sched) {
            std::optional<Tensor> n;
            if (!noise.is_none()) n = tensor_from(noise.cast<Array>());
            return array_from(ddim_step(tensor_from(eps), tensor_from(z), r, r_prev, n, sched));
        },
        py::arg("eps_theta"), py::arg("z"), py::arg("r"), py::arg("r_prev"),
        py::arg("noise") = py::none(), py::arg("sched"));

    m.def(
        "make_ddim_subsequence",
        [](int n_steps, int m_steps) { return make_ddim_subsequence(n_steps, m_steps).steps; },
        py::arg("n_steps"), py::arg("m"));

    m.def(
        "time_embed", [](int r, int dim) { return array_from(time_embed(r, dim)); }, py::arg("r"),
        py::arg("dim"));

    m.def(
        "psnr",
        [](const Array& a, const Array& b, double max_val) {
            return psnr(image_from(a), image_from(b), max_val);
        },
        py::arg("a"), py::arg("b"), py::arg("max_val") = 1.0);
    m.def(
        "ssim", [](const Array& a, const Array& b) { return ssim(image_from(a), image_from(b)); },
        py::arg("a"), py::arg("b"));

    m.def(
        "normalize_phi", [](const Array& v) { return array_from(normalize_phi(tensor_from(v))); },
        py::arg("v"));
    m.def(
        "embedding_distance",
        [](const Array& a, const Array& b) { return embedding_distance(tensor_from(a), tensor_from(b)); },
        py::arg("a"), py::arg("b"));

    m.def(
        "clip_budget",
        [](const Array& y, const Array& anchor, double rho) {
            return array_from(clip_budget(image_from(y), image_from(anchor), rho));
        },
        py::arg("y"), py::arg("anchor"), py::arg("rho"));

    m.def(
        "degrade",
        [](const Array& hq, double blur_sigma, int down_factor, double noise_sigma,
           std::uint64_t seed) {
            DegradeParams params{blur_sigma, down_factor, noise_sigma};
            return array_from(degrade(image_from(hq), params, seed));
        },
        py::arg("hq"), py::arg("blur_sigma") = 1.0, py::arg("down_factor") = 4,
        py::arg("noise_sigma") = 0.02, py::arg("seed") = 0);

    m.def(
        "generate_faces",
        [](std::uint64_t seed, int n_identities, int n_variants) {
            const Dataset ds = generate_synthetic_faces(seed, n_identities, n_variants);
            const int res = ds.resolution;
            py::array_t<double> hq({static_cast<int>(ds.records.size()), res, res});
            py::array_t<double> deg({static_cast<int>(ds.records.size()), res, res});
            std::vector<int> ids;
            auto h = hq.mutable_unchecked<3>();
            auto d = deg.mutable_unchecked<3>();
            for (std::size_t i = 0; i < ds.records.size(); ++i) {
                ids.push_back(ds.records[i].identity);
                for (int y = 0; y < res; ++y)
                    for (int x = 0; x < res; ++x) {
                        h(static_cast<py::ssize_t>(i), y, x) = ds.records[i].hq.at(0, y, x);
                        d(static_cast<py::ssize_t>(i), y, x) = ds.records[i].degraded.at(0, y, x);
                    }
            }
            return py::make_tuple(hq, deg, ids);
        },
        py::arg("seed"), py::arg("n_identities"), py::arg("n_variants"));

    m.def(
        "save_pgm",
        [](const std::string& path, const Array& image) { save_pgm(path, image_from(image)); },
        py::arg("path"), py::arg("image"));
    m.def(
        "load_pgm", [](const std::string& path) { return array_from(load_pgm(path)); }, py::arg("path"));
}
