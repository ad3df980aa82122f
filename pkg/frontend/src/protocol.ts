/**
 * Line-delimited JSON wire protocol spoken with the manager.
 *
 * Every message is one canonical-JSON line: keys sorted at every depth,
 * no whitespace, no NaN or Infinity. Canonical bytes are what make
 * recorded conformance transcripts comparable across implementations.
 */

export const PROTOCOL_VERSION = 1;

export interface Message {
  v: number;
  type: string;
  [field: string]: unknown;
}

export class ProtocolError extends Error {}

const REQUIRED_FIELDS: Record<string, readonly string[]> = {
  register: ["worker_id", "evaluators"],
  assign: ["trial_id"],
  result: [
    "trial_id",
    "min_val_mse",
    "best_epoch",
    "epochs_run",
    "param_count",
    "wall_seconds",
  ],
  error: ["trial_id", "reason"],
  heartbeat: ["worker_id"],
  drain: [],
  reject: ["code", "reason"],
};

function sortedForJson(value: unknown): unknown {
  if (typeof value === "number") {
    if (!Number.isFinite(value)) {
      throw new ProtocolError("non-finite numbers are not representable");
    }
    return value;
  }
  if (Array.isArray(value)) {
    return value.map(sortedForJson);
  }
  if (value !== null && typeof value === "object") {
    // protocol field names are never integer-like, so insertion order
    // survives JSON.stringify and sorted insertion yields sorted output
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(value).sort()) {
      out[key] = sortedForJson((value as Record<string, unknown>)[key]);
    }
    return out;
  }
  return value;
}

export function canonicalJson(value: unknown): string {
  const text = JSON.stringify(sortedForJson(value));
  if (text === undefined) {
    throw new ProtocolError("value is not JSON-representable");
  }
  return text;
}

export function encodeLine(msg: Message): string {
  return canonicalJson(msg) + "\n";
}

export function parseLine(line: string): Message {
  let value: unknown;
  try {
    value = JSON.parse(line);
  } catch (error) {
    const detail = error instanceof Error ? error.message : String(error);
    throw new ProtocolError(`message is not valid JSON: ${detail}`);
  }
  if (value === null || typeof value !== "object" || Array.isArray(value)) {
    throw new ProtocolError("message must be a JSON object");
  }
  return value as Message;
}

/** Check version and per-type required fields; returns msg unchanged. */
export function validateMessage(msg: Message): Message {
  const fields = REQUIRED_FIELDS[msg.type];
  if (fields === undefined) {
    throw new ProtocolError(`unknown message type ${JSON.stringify(msg.type)}`);
  }
  if (msg.v !== PROTOCOL_VERSION) {
    throw new ProtocolError(
      `protocol version ${JSON.stringify(msg.v)} does not match ${PROTOCOL_VERSION}`,
    );
  }
  for (const key of fields) {
    if (!(key in msg)) {
      throw new ProtocolError(`${msg.type} message missing field '${key}'`);
    }
  }
  return msg;
}

export function registerMessage(workerId: string, evaluators: string[]): Message {
  return {
    v: PROTOCOL_VERSION,
    type: "register",
    worker_id: workerId,
    evaluators: [...evaluators],
  };
}

export function resultMessage(
  trialId: number,
  minValMse: number,
  bestEpoch: number,
  epochsRun: number,
  paramCount: number,
  wallSeconds: number,
): Message {
  return {
    v: PROTOCOL_VERSION,
    type: "result",
    trial_id: trialId,
    min_val_mse: minValMse,
    best_epoch: bestEpoch,
    epochs_run: epochsRun,
    param_count: paramCount,
    wall_seconds: wallSeconds,
  };
}

export function errorMessage(trialId: number, reason: string): Message {
  return { v: PROTOCOL_VERSION, type: "error", trial_id: trialId, reason };
}

export function heartbeatMessage(workerId: string): Message {
  return { v: PROTOCOL_VERSION, type: "heartbeat", worker_id: workerId };
}
