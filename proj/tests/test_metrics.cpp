#include <doctest.h>

#include <stdexcept>

#include "advrestore/metrics.hpp"
#include "advrestore/rng.hpp"
#include "oracles.hpp"

using namespace advrestore;

namespace {

Tensor flipped_horizontal(const Tensor& img) {
    Tensor out = img;
    const int c = img.shape[0], h = img.shape[1], w = img.shape[2];
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(ci, y, x) = img.at(ci, y, w - 1 - x);
    return out;
}

}  // namespace

TEST_CASE("psnr basics") {
    Rng rng(1);
    const Tensor a = rng.uniform_tensor({1, 16, 16}, 0.0, 1.0);
    CHECK(psnr(a, a) == kPsnrSentinel);

    const Tensor zeros = Tensor::zeros({1, 8, 8});
    const Tensor ones = Tensor::full({1, 8, 8}, 1.0);
    CHECK(psnr(zeros, ones) == doctest::Approx(0.0));  // MSE = max_val^2

    Tensor b = a;
    for (double& v : b.data) v += 0.1;  // MSE exactly 0.01
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-9));

    CHECK_THROWS_AS(psnr(a, zeros), std::invalid_argument);
}

TEST_CASE("ssim basics") {
    Rng rng(2);
    const Tensor a = rng.uniform_tensor({1, 16, 16}, 0.0, 1.0);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

    const Tensor b = rng.uniform_tensor({1, 16, 16}, 0.0, 1.0);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));

    CHECK_THROWS_AS(ssim(Tensor::zeros({1, 8, 8}), Tensor::zeros({1, 8, 8})), std::invalid_argument);
}

TEST_CASE("ssim matches the scalar-loop oracle") {
    SUBCASE("constant offset case") {
        const Tensor a = Tensor::full({1, 12, 12}, 0.2);
        const Tensor b = Tensor::full({1, 12, 12}, 0.7);
        const double got = ssim(a, b);
        const double want = oracles::ssim_ref(a, b);
        CHECK(got == doctest::Approx(want).epsilon(1e-7));
        // Constant images: structure and variance terms drop out.
        const double closed_form = (2.0 * 0.2 * 0.7 + 1e-4) / (0.2 * 0.2 + 0.7 * 0.7 + 1e-4);
        CHECK(got == doctest::Approx(closed_form).epsilon(1e-7));
    }
    SUBCASE("random images") {
        Rng rng(3);
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor a = rng.uniform_tensor({1, 13, 15}, 0.0, 1.0);
            const Tensor b = rng.uniform_tensor({1, 13, 15}, 0.0, 1.0);
            CHECK(ssim(a, b) == doctest::Approx(oracles::ssim_ref(a, b)).epsilon(1e-7));
        }
    }
}

TEST_CASE("both metrics are invariant under a joint horizontal flip") {
    Rng rng(4);
    const Tensor a = rng.uniform_tensor({1, 14, 14}, 0.0, 1.0);
    const Tensor b = rng.uniform_tensor({1, 14, 14}, 0.0, 1.0);
    CHECK(psnr(a, b) == doctest::Approx(psnr(flipped_horizontal(a), flipped_horizontal(b))).epsilon(1e-12));
    CHECK(ssim(a, b) == doctest::Approx(ssim(flipped_horizontal(a), flipped_horizontal(b))).epsilon(1e-9));
}

TEST_CASE("attack success rate counting") {
    const std::vector<double> d = {0.1, 0.2, 0.3, 0.35, 0.4, 0.9, 1.0, 1.5, 2.0, 3.0};
    const AsrReport r = attack_success_rate(d, "v", 0.5);
    CHECK(r.successes == 5);
    CHECK(r.total == 10);
    CHECK(r.asr_percent() == doctest::Approx(50.0));

    SUBCASE("seven of ten") {
        const std::vector<double> d7 = {0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 2.0, 2.0, 2.0};
        CHECK(attack_success_rate(d7, "v", 0.5).asr_percent() == doctest::Approx(70.0));
    }
    SUBCASE("threshold zero never succeeds on positive distances") {
        CHECK(attack_success_rate(d, "v", 0.0).successes == 0);
    }
    SUBCASE("identical embeddings always succeed") {
        const std::vector<double> zero(10, 0.0);
        CHECK(attack_success_rate(zero, "v", 0.5).asr_percent() == doctest::Approx(100.0));
    }
    SUBCASE("empty set fails") {
        CHECK_THROWS_AS(attack_success_rate({}, "v", 0.5), std::invalid_argument);
    }
}

TEST_CASE("asr over a union is the count-weighted combination") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> a, b;
        const int na = rng.uniform_int(1, 30), nb = rng.uniform_int(1, 30);
        for (int i = 0; i < na; ++i) a.push_back(rng.uniform(0.0, 2.0));
        for (int i = 0; i < nb; ++i) b.push_back(rng.uniform(0.0, 2.0));
        std::vector<double> both = a;
        both.insert(both.end(), b.begin(), b.end());
        const double thr = rng.uniform(0.0, 2.0);
        const AsrReport ra = attack_success_rate(a, "v", thr);
        const AsrReport rb = attack_success_rate(b, "v", thr);
        const AsrReport rboth = attack_success_rate(both, "v", thr);
        CHECK(rboth.successes == ra.successes + rb.successes);
        CHECK(rboth.asr_percent() ==
              doctest::Approx((ra.asr_percent() * na + rb.asr_percent() * nb) / (na + nb)));
    }
}

TEST_CASE("quality report means") {
    QualityReport q;
    Rng rng(6);
    const Tensor ref = rng.uniform_tensor({1, 12, 12}, 0.0, 1.0);
    q.add(ref, ref);
    CHECK(q.mean_ssim() == doctest::Approx(1.0));
    CHECK(q.mean_psnr() == doctest::Approx(kPsnrSentinel));
}
