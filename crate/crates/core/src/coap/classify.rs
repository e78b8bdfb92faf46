use super::{Code, Message, MessageType};

/// What an intercepted message means for the node's dynamic state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InteractionKind {
    PutRequest,
    ObserveRegister,
    ObserveDeregister,
    BindingRequest,
    DeployBlock,
    Notification,
    ResetSignal,
    AckSignal,
    Other,
}

/// Total and deterministic. Binding detection takes precedence over plain
/// observe registration, block transfers over plain PUTs.
pub fn classify(msg: &Message) -> InteractionKind {
    use InteractionKind::*;

    let observe = msg.options.observe();
    match msg.msg_type {
        MessageType::Rst => return ResetSignal,
        MessageType::Ack if msg.code.is_empty() => return AckSignal,
        _ => {}
    }
    match msg.code {
        Code::GET => match observe {
            Some(_) if msg.options.binding().is_some() => BindingRequest,
            Some(1) => ObserveDeregister,
            Some(_) => ObserveRegister,
            None => Other,
        },
        Code::PUT | Code::POST if msg.options.block1().is_some() => DeployBlock,
        Code::PUT => PutRequest,
        c if c.is_response() && observe.is_some() => Notification,
        _ => Other,
    }
}
