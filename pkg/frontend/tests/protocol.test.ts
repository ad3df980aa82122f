import { describe, expect, it } from "vitest";

import {
  AdapterError,
  assignmentFileText,
  parseResultFile,
  renderCommand,
  validateTemplate,
} from "../src/adapter.js";
import {
  ProtocolError,
  canonicalJson,
  parseLine,
  registerMessage,
  resultMessage,
  validateMessage,
} from "../src/protocol.js";

describe("canonicalJson", () => {
  it("sorts keys recursively and stays compact", () => {
    const out = canonicalJson({ b: 1, a: { d: 2, c: [1, 2] } });
    expect(out).toBe('{"a":{"c":[1,2],"d":2},"b":1}');
  });

  it("rejects non-finite numbers", () => {
    expect(() => canonicalJson({ x: Infinity })).toThrow(ProtocolError);
    expect(() => canonicalJson({ x: NaN })).toThrow(ProtocolError);
  });
});

describe("parseLine / validateMessage", () => {
  it("rejects non-object lines", () => {
    expect(() => parseLine("[1,2]")).toThrow(ProtocolError);
    expect(() => parseLine("not json")).toThrow(ProtocolError);
  });

  it("rejects unknown type and wrong version", () => {
    expect(() => validateMessage({ v: 1, type: "bogus" })).toThrow(/unknown message type/);
    expect(() => validateMessage({ v: 2, type: "drain" })).toThrow(/protocol version/);
  });

  it("rejects a message missing a required field", () => {
    expect(() => validateMessage({ v: 1, type: "heartbeat" })).toThrow(/worker_id/);
  });

  it("accepts well-formed constructor output", () => {
    const reg = registerMessage("w1", ["external"]);
    expect(validateMessage(reg)).toBe(reg);
    const res = resultMessage(3, 0.25, 4, 9, 123, 1.5);
    expect(canonicalJson(res)).toBe(
      '{"best_epoch":4,"epochs_run":9,"min_val_mse":0.25,"param_count":123,"trial_id":3,"type":"result","v":1,"wall_seconds":1.5}',
    );
  });
});

describe("command templates", () => {
  it("requires both file placeholders", () => {
    expect(() => validateTemplate("train.sh {assignment}")).toThrow(/\{result\}/);
    expect(() => validateTemplate("train.sh")).toThrow(/\{assignment\} and \{result\}/);
    expect(() => validateTemplate("run {assignment} {result}")).not.toThrow();
  });

  it("substitutes every occurrence of every placeholder", () => {
    const cmd = renderCommand("go {trial_id} {assignment} {result} # {trial_id}", {
      assignment: "/w/a.json",
      result: "/w/r.json",
      trialId: 7,
    });
    expect(cmd).toBe("go 7 /w/a.json /w/r.json # 7");
  });
});

describe("assignmentFileText", () => {
  it("drops the envelope fields and keeps every literal byte-exact", () => {
    const line =
      '{"budget":{"adam_epsilon":1e-07},"subset_seed":10137942873739852297,' +
      '"timeout_seconds":30.0,"trial_id":0,"type":"assign","v":1}';
    expect(assignmentFileText(line)).toBe(
      '{"budget":{"adam_epsilon":1e-07},"subset_seed":10137942873739852297,' +
        '"timeout_seconds":30.0,"trial_id":0}\n',
    );
  });
});

describe("parseResultFile", () => {
  it("reads a full result", () => {
    const parsed = parseResultFile(
      '{"min_val_mse": 0.5, "best_epoch": 2, "epochs_run": 8, "param_count": 33}',
    );
    expect(parsed).toEqual({ minValMse: 0.5, bestEpoch: 2, epochsRun: 8, paramCount: 33 });
  });

  it("defaults best_epoch to epochs_run", () => {
    const parsed = parseResultFile(
      '{"min_val_mse": 0.5, "epochs_run": 8, "param_count": 33}',
    );
    expect(parsed.bestEpoch).toBe(8);
  });

  it("names the offending problem", () => {
    expect(() => parseResultFile("oops")).toThrow(/not valid JSON/);
    expect(() => parseResultFile("[]")).toThrow(/JSON object/);
    expect(() => parseResultFile('{"min_val_mse": 0.5, "param_count": 3}')).toThrow(
      /epochs_run/,
    );
    expect(() =>
      parseResultFile('{"min_val_mse": "low", "epochs_run": 8, "param_count": 3}'),
    ).toThrow(/min_val_mse/);
    expect(() =>
      parseResultFile('{"min_val_mse": 0.5, "epochs_run": 8.5, "param_count": 3}'),
    ).toThrow(/epochs_run/);
    expect(() => parseResultFile("oops")).toThrow(AdapterError);
  });
});
