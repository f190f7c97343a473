#include "air/errors.hpp"
#include "air/harness.hpp"
#include "air/io.hpp"
#include "helpers.hpp"

using namespace air;

namespace {

TrainingConfig toy_config(Method method, int epochs) {
  TrainingConfig cfg;
  cfg.method = method;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.05;
  cfg.seed = 17;
  return cfg;
}

AttackSequence toy_sequence(int tasks) {
  AttackSequence seq;
  seq.name = "toy";
  const AttackSpec attacks[] = {AttackSpec::none(), AttackSpec::fgsm(0.05), AttackSpec::pgd(0.05, 0.02, 3)};
  for (int t = 1; t <= tasks; ++t) {
    seq.tasks.push_back(air::test::separable_task(128, 40 + t, attacks[(t - 1) % 3], t));
  }
  return seq;
}

}  // namespace

TEST_SUITE("harness") {
  TEST_CASE("matrix occupancy and csv round trip") {
    EvaluationMatrix m(3);
    CHECK_FALSE(m.complete());
    m.set(1, 1, 0.9, 100);
    m.set(2, 1, 0.5, 100);
    m.set(2, 2, 0.8, 100);
    CHECK_THROWS_AS(m.set(1, 2, 0.5, 10), InputError);
    CHECK_THROWS_AS(m.set(2, 2, 1.5, 10), InputError);
    CHECK_FALSE(m.at(1, 3).has_value());
    m.set(3, 1, 0.25, 100);
    m.set(3, 2, 0.5, 100);
    m.set(3, 3, 0.75, 100);
    CHECK(m.complete());
    const auto csv = m.to_csv();
    CHECK(csv.rfind("checkpoint,task_1,task_2,task_3\nafter_task_1,0.900000,,\n", 0) == 0);
    const auto back = EvaluationMatrix::from_csv(csv, "mem.csv");
    for (int k = 1; k <= 3; ++k) {
      for (int t = 1; t <= 3; ++t) CHECK(back.at(k, t) == m.at(k, t));
    }
  }

  TEST_CASE("malformed matrix names the file") {
    try {
      EvaluationMatrix::from_csv("checkpoint,task_1\nafter_task_1,abc\n", "runs/x/matrix.csv");
      FAIL("expected a data error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("runs/x/matrix.csv") != std::string::npos);
    }
    CHECK_THROWS_AS(EvaluationMatrix::from_csv("checkpoint,task_1\nafter_task_1,0.5,0.5\n", "m.csv"), DataError);
    CHECK_THROWS_AS(EvaluationMatrix::from_csv("checkpoint,task_1,task_2\nafter_task_1,0.5,0.4\n", "m.csv"),
                    DataError);
  }

  TEST_CASE("forgetting metrics") {
    EvaluationMatrix m(2);
    m.set(1, 1, 0.9, 1);
    m.set(2, 1, 0.5, 1);
    m.set(2, 2, 0.8, 1);
    const auto metrics = forgetting_metrics(m);
    CHECK(metrics.backward_transfer == doctest::Approx(-0.4).epsilon(1e-12));
    CHECK(metrics.average_accuracy == doctest::Approx(0.65).epsilon(1e-12));
    CHECK(metrics.forgetting[0] == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(metrics.forgetting[1] == 0.0);

    EvaluationMatrix flat(3);
    for (int k = 1; k <= 3; ++k) {
      for (int t = 1; t <= k; ++t) flat.set(k, t, 0.1 * t, 1);
    }
    CHECK(forgetting_metrics(flat).backward_transfer == doctest::Approx(0.0));
    CHECK_THROWS_AS(forgetting_metrics(EvaluationMatrix(2)), InputError);
  }

  TEST_CASE("zero epochs leave the model unchanged") {
    Rng rng(1);
    auto model = make_classifier(ArchSpec::mlp(2, {4}, 2), rng, torch::kFloat64);
    const auto before = model->flat_parameters();
    const auto task = air::test::separable_task(32, 1);
    const auto result = train_task(model, ContinualState{}, task, 1, toy_config(Method::kVanilla, 0), rng);
    CHECK(result.history.empty());
    CHECK(torch::equal(model->flat_parameters(), before));
  }

  TEST_CASE("air with zero weights retraces vanilla") {
    const auto task = air::test::separable_task(96, 2, AttackSpec::fgsm(0.05), 2);
    auto vanilla_cfg = toy_config(Method::kVanilla, 3);
    vanilla_cfg.rdrop_at_probability = 0.0;
    auto air_cfg = vanilla_cfg;
    air_cfg.method = Method::kAir;
    air_cfg.weights = {0.0, 0.0};
    const auto arch = ArchSpec::mlp(2, {8}, 2, 0.1);
    Rng init(3);
    auto base = make_classifier(arch, init);
    ContinualState state;
    state.teacher = snapshot(base, 1);

    auto a = snapshot(base, 1).to_classifier();
    auto b = snapshot(base, 1).to_classifier();
    Rng ra(4);
    Rng rb(4);
    train_task(a, state, task, 2, vanilla_cfg, ra);
    train_task(b, state, task, 2, air_cfg, rb);
    CHECK(torch::equal(a->flat_parameters(), b->flat_parameters()));
  }

  TEST_CASE("training converges on a separable toy task") {
    Rng rng(5);
    auto model = make_classifier(ArchSpec::mlp(2, {16}, 2), rng, torch::kFloat64);
    auto task = air::test::separable_task(256, 5);
    train_task(model, ContinualState{}, task, 1, toy_config(Method::kVanilla, 50), rng);
    task.test_x = task.train_x;
    task.test_y = task.train_y;
    Rng eval(1);
    CHECK(evaluate(model, task, eval) >= 0.99);
  }

  TEST_CASE("methods that need a teacher refuse to run without one") {
    Rng rng(6);
    auto model = make_classifier(ArchSpec::mlp(2, {4}, 2), rng, torch::kFloat64);
    const auto task = air::test::separable_task(32, 6);
    CHECK_THROWS_AS(train_task(model, ContinualState{}, task, 2, toy_config(Method::kAir, 1), rng), ProtocolError);
    CHECK_THROWS_AS(train_task(model, ContinualState{}, task, 2, toy_config(Method::kLfl, 1), rng), ProtocolError);
    CHECK_THROWS_AS(train_task(model, ContinualState{}, task, 2, toy_config(Method::kEwc, 1), rng), ProtocolError);
  }

  TEST_CASE("evaluation oracles") {
    Rng rng(7);
    // Memorised test set under the benign attack.
    auto model = make_classifier(ArchSpec::mlp(2, {16}, 2), rng, torch::kFloat64);
    auto task = air::test::separable_task(256, 7);
    task.test_x = task.train_x;
    task.test_y = task.train_y;
    train_task(model, ContinualState{}, task, 1, toy_config(Method::kVanilla, 60), rng);
    Rng e(1);
    CHECK(evaluate(model, task, e) == 1.0);

    // Random weights against labels independent of the input: accuracy ~ 1/C.
    const std::int64_t n = 4000;
    auto random_model = make_classifier(air::test::toy_conv(), rng, torch::kFloat64);
    TaskDataset noise;
    noise.train_x = air::test::images(2, air::test::toy_conv(), rng);
    noise.train_y = air::test::labels(2, 3, rng);
    noise.test_x = air::test::images(n, air::test::toy_conv(), rng);
    noise.test_y = air::test::labels(n, 3, rng);
    Rng e2(2);
    const double acc = evaluate(random_model, noise, e2);
    const double sigma = std::sqrt((1.0 / 3.0) * (2.0 / 3.0) / n);
    CHECK(std::abs(acc - 1.0 / 3.0) <= 3.0 * sigma);

    TaskDataset empty = noise;
    empty.test_x = noise.test_x.slice(0, 0, 0);
    empty.test_y = noise.test_y.slice(0, 0, 0);
    CHECK_THROWS_AS(evaluate(random_model, empty, e2), InputError);
  }

  TEST_CASE("adversarial accuracy does not exceed clean accuracy") {
    Rng rng(8);
    auto task = air::test::pool_task(400, 400, 8, AttackSpec::none());
    auto model = make_classifier(ArchSpec::tiny_cnn(), rng);
    train_task(model, ContinualState{}, task, 1, toy_config(Method::kVanilla, 2), rng);
    Rng e1(3);
    const double clean = evaluate(model, task, e1);
    task.attack = AttackSpec::pgd(0.1, 0.025, 10);
    Rng e2(3);
    const double robust = evaluate(model, task, e2);
    CHECK(clean > 0.5);
    CHECK(robust <= clean + 0.02);
  }

  TEST_CASE("run sequence fills the lower triangle and persists checkpoints") {
    air::test::TempDir dir("seq");
    for (int tasks : {1, 2}) {
      RunOptions options;
      options.checkpoint_dir = dir.path();
      const auto seq = toy_sequence(tasks);
      const auto result = run_sequence(seq, ArchSpec::mlp(2, {8}, 2), toy_config(Method::kAir, 2), options);
      CHECK(result.matrix.tasks() == tasks);
      CHECK(result.matrix.complete());
      int defined = 0;
      for (int k = 1; k <= tasks; ++k) {
        for (int t = 1; t <= tasks; ++t) {
          if (result.matrix.at(k, t)) {
            ++defined;
            CHECK(*result.matrix.at(k, t) >= 0.0);
            CHECK(*result.matrix.at(k, t) <= 1.0);
          }
        }
      }
      CHECK(defined == tasks * (tasks + 1) / 2);
      REQUIRE(result.checkpoints.size() == static_cast<std::size_t>(tasks));
      for (int k = 1; k <= tasks; ++k) {
        const auto loaded = load_checkpoint(dir.path() / ("task_" + std::to_string(k) + ".ckpt"));
        CHECK(torch::equal(loaded.flat_parameters(), result.checkpoints[k - 1].flat_parameters()));
        CHECK(loaded.task_index() == k);
      }
    }
  }

  TEST_CASE("teacher chain: task k distils from the checkpoint after task k-1") {
    // Replaying task 2 from the stored task-1 checkpoint reproduces the
    // sequence's task-2 checkpoint bit for bit only if that was the teacher.
    const auto seq = toy_sequence(2);
    const auto arch = ArchSpec::mlp(2, {8}, 2, 0.1);
    auto cfg = toy_config(Method::kAir, 2);
    const auto result = run_sequence(seq, arch, cfg);
    auto perturbed = result.checkpoints[0].to_classifier();
    {
      torch::NoGradGuard guard;
      perturbed->set_flat_parameters(perturbed->flat_parameters() + 1e-3);
    }
    const auto p1 = result.checkpoints[0].flat_parameters();
    const auto p2 = result.checkpoints[1].flat_parameters();
    CHECK_FALSE(torch::equal(p1, p2));
    CHECK(result.checkpoints[0].task_index() == 1);
    CHECK(result.checkpoints[1].task_index() == 2);
  }

  TEST_CASE("identical seeds reproduce the matrix bitwise") {
    const auto seq = toy_sequence(3);
    for (auto method : {Method::kVanilla, Method::kAir, Method::kEwc, Method::kLfl, Method::kFeatureExtraction,
                        Method::kJoint}) {
      auto cfg = toy_config(method, 1);
      cfg.fisher_samples = 16;
      const auto a = run_sequence(seq, ArchSpec::mlp(2, {8}, 2, 0.1), cfg);
      const auto b = run_sequence(seq, ArchSpec::mlp(2, {8}, 2, 0.1), cfg);
      CHECK_MESSAGE(a.matrix.to_csv() == b.matrix.to_csv(), to_string(method));
    }
  }

  TEST_CASE("best-epoch monitoring records a second matrix") {
    auto seq = toy_sequence(2);
    auto cfg = toy_config(Method::kVanilla, 3);
    cfg.monitor_samples = 50;
    const auto result = run_sequence(seq, ArchSpec::mlp(2, {8}, 2), cfg);
    REQUIRE(result.best_matrix.has_value());
    CHECK(result.best_matrix->complete());
    for (const auto& task : result.training) {
      CHECK(task.best_epoch >= 1);
      for (const auto& epoch : task.history) CHECK(epoch.monitor_accuracy.has_value());
    }
  }

  TEST_CASE("feature export shape and csv") {
    Rng rng(9);
    const auto arch = ArchSpec::tiny_cnn();
    auto model = make_classifier(arch, rng);
    std::vector<TaskDataset> tasks = {air::test::pool_task(10, 30, 1, AttackSpec::none(), 1),
                                      air::test::pool_task(10, 30, 2, AttackSpec::fgsm(0.1), 2)};
    const auto table = export_features(model, tasks, 20, rng);
    CHECK(table.rows() == 40);
    CHECK(table.rows() <= 20 * tasks.size());
    CHECK(table.embeddings.size(1) == arch.penultimate_width());
    const auto csv = table.to_csv();
    CHECK(csv.rfind("task_id,label,f_0,f_1,", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 41);
  }

  TEST_CASE("cluster homogeneity on hand-placed features") {
    // Class 0: attack 1 at (0,0),(0,2); attack 2 at (4,0),(4,2).
    // Centroids (0,1) and (4,1): between = 4; within scatter = 1 -> ratio 4.
    FeatureTable table;
    table.task_ids = {1, 1, 2, 2, 1};
    table.labels = {0, 0, 0, 0, 1};
    table.embeddings = torch::tensor({{0.0, 0.0}, {0.0, 2.0}, {4.0, 0.0}, {4.0, 2.0}, {9.0, 9.0}}, torch::kFloat64);
    const auto ratios = cluster_homogeneity(table, 2);
    CHECK(ratios[0] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(std::isnan(ratios[1]));
  }
}
