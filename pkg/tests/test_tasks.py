import pytest
from hypothesis import given, settings, strategies as st

from mifo.tasks import (VOCAB, DemonstrationException, Demonstration, Question, TaskConfig,
                        TaskConfigException, VocabularyException, dump_questions, extract,
                        generate_question, load_questions, make_questions, question_modulus,
                        reward, teacher_solve)


def enc(text):
    return VOCAB.encode(text.split())


def test_vocabulary_round_trip():
    assert VOCAB.text(enc("3 + 4 mod 7 = ?")) == "3 + 4 mod 7 = ?"
    assert len(VOCAB) == 19
    with pytest.raises(VocabularyException):
        VOCAB.encode(["x"])
    with pytest.raises(VocabularyException):
        VOCAB.decode([99])


def test_config_validation():
    with pytest.raises(TaskConfigException):
        TaskConfig(modulus=8)
    with pytest.raises(TaskConfigException):
        TaskConfig(min_chain=3, max_chain=2)
    with pytest.raises(TaskConfigException):
        TaskConfig(train_seed_start=0, n_train=100, eval_seed_start=50)


def test_generation_is_deterministic(task):
    assert generate_question(task, 3) == generate_question(task, 3)


def test_prompt_format(task):
    q = generate_question(task, 0)
    symbols = VOCAB.decode(q.prompt)
    assert symbols[-4:] == ["mod", "5", "=", "?"]
    assert task.min_chain <= q.difficulty <= task.max_chain
    assert 0 <= int(q.answer) < 5


def test_left_to_right_evaluation():
    q = Question(seed=0, prompt=enc("3 + 4 * 2 mod 7 = ?"), answer="0", difficulty=2)
    demo = teacher_solve(q)
    assert VOCAB.text(demo.solution) == "3 + 4 = 0 ; 0 * 2 = 0 ; #### 0 <eos>"


def test_subtraction_wraps():
    q = Question(seed=0, prompt=enc("1 - 3 mod 5 = ?"), answer="3", difficulty=1)
    assert VOCAB.text(teacher_solve(q).solution) == "1 - 3 = 3 ; #### 3 <eos>"


def test_multi_digit_modulus():
    q = Question(seed=0, prompt=enc("9 * 9 mod 1 1 = ?"), answer="4", difficulty=1)
    assert question_modulus(q) == 11
    assert extract(teacher_solve(q).solution) == "4"


def test_demonstration_must_verify():
    q = Question(seed=0, prompt=enc("1 + 1 mod 5 = ?"), answer="3", difficulty=1)
    with pytest.raises(DemonstrationException):
        teacher_solve(q)
    with pytest.raises(DemonstrationException):
        Demonstration(question=q, solution=enc("#### 2 <eos>"))


def test_extract():
    assert extract(enc("1 + 1 = 2 ; #### 2 <eos>")) == "2"
    assert extract(enc("#### 1 ; #### 3 4 <eos>")) == "34"
    assert extract(enc("1 + 1 = 2 ;")) is None
    assert extract(enc("#### <eos>")) is None
    assert extract(()) is None


def test_reward(task):
    q = generate_question(task, 1)
    assert reward(teacher_solve(q).solution, q) == 1
    wrong = str((int(q.answer) + 1) % 5)
    assert reward(enc(f"#### {wrong} <eos>"), q) == 0
    assert reward(enc("; ;"), q) == 0


def test_splits_are_disjoint(task):
    train = {q.prompt for q in make_questions(task, range(200))}
    evals = {q.prompt for q in make_questions(task, task.eval_seeds)}
    assert not train & evals
    assert task.split_of(task.eval_seed_start) == "eval"
    assert task.split_of(0) == "train"


def test_questions_round_trip_through_jsonl(questions, tmp_path):
    path = tmp_path / "questions.jsonl"
    dump_questions(questions, path)
    assert load_questions(path) == questions


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6 - 1), modulus=st.sampled_from([2, 3, 5, 7, 11, 13]),
       chain=st.integers(1, 4))
def test_demonstrations_always_verify(seed, modulus, chain):
    cfg = TaskConfig(modulus=modulus, min_chain=1, max_chain=chain)
    q = generate_question(cfg, seed)
    demo = teacher_solve(q)
    assert extract(demo.solution) == q.answer
    assert demo.solution[-1] == VOCAB.eos
    assert demo.solution.count(VOCAB.answer_delim) == 1
